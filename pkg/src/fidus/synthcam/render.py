"""Synthetic stereo views of marker sets with exact keypoint ground truth.

Each marker is drawn as a card (bit grid plus a one-cell white quiet zone) by
inverse mapping: every output subsample is cast as a ray through the lens
model and intersected with the card plane, so lens distortion bends card
edges exactly the way projection of the true corners predicts. A 4x4
subsample box filter with a per-pixel low-discrepancy phase anti-aliases the
result; without it, subpixel corner ground truth would be meaningless.

The returned truth table carries, for every outer corner and interior
chessboard node of every marker, the exact projected subpixel position in
both eyes and whether it landed inside each image.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from fidus.errors import BehindCamera
from fidus.geometry import RigidTransform, compose
from fidus.synthcam.camera import CameraModel, StereoRig
from fidus.synthcam.trajectory import NoiseModel

BLACK_LEVEL = 0.1
WHITE_LEVEL = 0.9
BACKGROUND_LEVEL = 0.3
_SUBSAMPLES = 4  # per axis; 16 per pixel
_BBOX_PAD_PX = 3.0


@dataclass(frozen=True)
class TruthEntry:
    """Ground truth for one keypoint of one rendered marker."""

    set_id: str
    label: KeypointLabel
    position_rig: np.ndarray  # 3D location, rig (left-camera) frame, mm
    left_px: np.ndarray       # exact subpixel projection, left eye
    right_px: np.ndarray
    left_in_frame: bool
    right_in_frame: bool


@dataclass(frozen=True)
class TruthTable:
    """All keypoint ground truth for one rendered stereo frame."""

    entries: tuple

    def for_set(self, set_id: str) -> list:
        return [e for e in self.entries if e.set_id == set_id]

    def lookup(self, set_id: str) -> dict:
        return {e.label: e for e in self.entries if e.set_id == set_id}

    def marker_in_frame(self, set_id: str, marker_id: int) -> tuple:
        """(fully inside left, fully inside right) for one marker."""
        flags_l, flags_r = [], []
        for e in self.entries:
            if e.set_id == set_id and e.label.marker_id == marker_id:
                flags_l.append(e.left_in_frame)
                flags_r.append(e.right_in_frame)
        if not flags_l:
            raise KeyError(f"marker {marker_id} of set {set_id!r} not in table")
        return all(flags_l), all(flags_r)

    def out_of_frame(self) -> list:
        """(set_id, marker_id, eye) for every marker not fully visible."""
        seen = []
        pairs = sorted({(e.set_id, e.label.marker_id) for e in self.entries})
        for set_id, marker_id in pairs:
            in_l, in_r = self.marker_in_frame(set_id, marker_id)
            if not in_l:
                seen.append((set_id, marker_id, "left"))
            if not in_r:
                seen.append((set_id, marker_id, "right"))
        return seen


class _Card:
    """One marker's card geometry expressed in a single eye's frame."""

    def __init__(self, marker, eye_from_set: RigidTransform):
        corners = eye_from_set.apply(marker.outer_corners_3d)
        g = marker.grid_cells
        self.grid = g
        self.c0 = corners[0]
        self.e_u = (corners[1] - corners[0]) / g  # one cell along bit-x
        self.e_v = (corners[3] - corners[0]) / g  # one cell along bit-y
        self.depth = float(np.mean(corners[:, 2]))
        # Bordered bit grid: border ring black (0), payload bits inside.
        bordered = np.zeros((g, g), dtype=np.uint8)
        bordered[1:-1, 1:-1] = marker.bits
        self.bordered = bordered
        normal = np.cross(self.e_u, self.e_v)
        self.normal = normal
        self.dual_u = np.cross(self.e_v, normal)
        self.dual_u /= np.dot(self.e_u, self.dual_u)
        self.dual_v = np.cross(normal, self.e_u)
        self.dual_v /= np.dot(self.e_v, self.dual_v)

    def outline_cells(self) -> np.ndarray:
        """Card boundary in cell coordinates (corners + edge midpoints)."""
        lo, hi, mid = -1.0, self.grid + 1.0, self.grid / 2.0
        return np.array([[lo, lo], [mid, lo], [hi, lo], [hi, mid],
                         [hi, hi], [mid, hi], [lo, hi], [lo, mid]])

    def cells_to_eye(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=float)
        return (self.c0 + cells[:, :1] * self.e_u + cells[:, 1:] * self.e_v)

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Card intensity at cell coordinates; quiet zone is white."""
        cx = np.floor(u).astype(int)
        cy = np.floor(v).astype(int)
        inside = (cx >= 0) & (cx < self.grid) & (cy >= 0) & (cy < self.grid)
        out = np.full(u.shape, WHITE_LEVEL)
        bits = self.bordered[np.clip(cy, 0, self.grid - 1),
                             np.clip(cx, 0, self.grid - 1)]
        out[inside & (bits == 0)] = BLACK_LEVEL
        return out


# Low-discrepancy per-pixel phases for the subsample grid (R2 sequence
# constants). A fixed grid quantizes the coverage of a pixel-aligned edge to
# 1/s of a pixel, which shows up as a systematic subpixel bias on exactly
# horizontal/vertical edges; sliding the grid torus-style by a phase that
# varies pixel to pixel decorrelates that error along the edge.
_PHASE_X = 0.7548776662466927
_PHASE_Y = 0.5698402909980532


def _subsample_points(px: np.ndarray, py: np.ndarray, s: int):
    """Jittered s x s subsample coordinates for flat pixel lists: (n, s*s)."""
    frac_x = (_PHASE_X * px + _PHASE_Y * py) % 1.0
    frac_y = (_PHASE_Y * px + _PHASE_X * py) % 1.0
    off = (np.arange(s) + 0.5) / s
    ox = ((off[None, :] + frac_x[:, None]) % 1.0) - 0.5  # (n, s)
    oy = ((off[None, :] + frac_y[:, None]) % 1.0) - 0.5
    sub_x = np.broadcast_to(px[:, None, None] + ox[:, None, :],
                            (len(px), s, s))
    sub_y = np.broadcast_to(py[:, None, None] + oy[:, :, None],
                            (len(py), s, s))
    return sub_x.reshape(len(px), s * s), sub_y.reshape(len(py), s * s)


def _plane_values(cam: CameraModel, card: _Card, xs: np.ndarray,
                  ys: np.ndarray):
    """Card intensity and hit mask for flat arrays of pixel coordinates."""
    rays = cam.unproject(np.stack([xs, ys], axis=-1))
    denom = rays @ card.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.dot(card.c0, card.normal) / denom
    hits = t[:, None] * rays - card.c0
    u = hits @ card.dual_u
    v = hits @ card.dual_v
    on_card = (np.isfinite(t) & (t > 1e-6)
               & (u >= -1.0) & (u <= card.grid + 1.0)
               & (v >= -1.0) & (v <= card.grid + 1.0))
    return np.where(on_card, card.sample(u, v), 0.0), on_card


def _paint_card(canvas: np.ndarray, cam: CameraModel, card: _Card) -> None:
    outline_eye = card.cells_to_eye(card.outline_cells())
    if np.any(outline_eye[:, 2] <= 1e-6):
        raise BehindCamera("marker card reaches behind the camera")
    outline_px = cam.project(outline_eye)
    x0 = int(np.floor(outline_px[:, 0].min() - _BBOX_PAD_PX))
    x1 = int(np.ceil(outline_px[:, 0].max() + _BBOX_PAD_PX))
    y0 = int(np.floor(outline_px[:, 1].min() - _BBOX_PAD_PX))
    y1 = int(np.ceil(outline_px[:, 1].max() + _BBOX_PAD_PX))
    x0, x1 = max(x0, 0), min(x1, cam.width - 1)
    y0, y1 = max(y0, 0), min(y1, cam.height - 1)
    if x0 > x1 or y0 > y1:
        return
    ny, nx = y1 - y0 + 1, x1 - x0 + 1

    # Small (distant) cards get denser antialiasing: their few edge pixels
    # carry all the subpixel information and oversampling them is cheap.
    s = _SUBSAMPLES if max(ny, nx) > 64 else 2 * _SUBSAMPLES

    px = np.arange(x0, x1 + 1, dtype=float)
    py = np.arange(y0, y1 + 1, dtype=float)
    gx, gy = np.meshgrid(px, py)
    coarse, on_c = _plane_values(cam, card, gx.ravel(), gy.ravel())
    coarse = coarse.reshape(ny, nx)
    on_c = on_c.reshape(ny, nx)

    # A pixel whose 5x5 center-sample neighborhood is one flat region keeps
    # its center sample — averaging s*s identical values is exact — so only
    # pixels within 2 px of a color boundary get the full subsample grid.
    # The finest card feature (one cell at the longest distance and steepest
    # tilt the bench uses) spans well over 1 px, so it cannot slip between
    # center samples undetected.
    field = np.where(on_c, coarse, -1.0).astype(np.float32)
    kernel = np.ones((5, 5), dtype=np.uint8)
    mixed = cv2.dilate(field, kernel) != cv2.erode(field, kernel)

    region = canvas[y0:y1 + 1, x0:x1 + 1]
    out = np.where(on_c, coarse, region)
    iy, ix = np.nonzero(mixed)
    if iy.size:
        # Box-filter the subsamples; where a subsample misses the card, the
        # existing canvas shows through (edge compositing).
        sub_x, sub_y = _subsample_points(px[ix], py[iy], s)
        values, on_card = _plane_values(cam, card, sub_x.ravel(),
                                        sub_y.ravel())
        card_sum = values.reshape(-1, s * s).sum(axis=1)
        n_on = on_card.reshape(-1, s * s).sum(axis=1)
        out[iy, ix] = (card_sum + (s * s - n_on) * region[iy, ix]) / (s * s)
    canvas[y0:y1 + 1, x0:x1 + 1] = out


def _finish_eye(canvas: np.ndarray, noise: NoiseModel, gain: float,
                rng: np.random.Generator) -> np.ndarray:
    img = canvas * gain
    if noise.pixel_sigma > 0:
        img = img + rng.normal(0.0, noise.pixel_sigma, img.shape)
    if noise.blur_radius > 0:
        img = cv2.GaussianBlur(img, (0, 0), noise.blur_radius)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_stereo(scene, rig: StereoRig, noise: NoiseModel = NoiseModel(),
                  seed=0):
    """Render marker sets into both eyes of a stereo rig.

    scene is a sequence of (MarkerSet, pose) pairs, poses expressed in the
    rig (left-camera) frame. Returns (left image, right image, TruthTable);
    images are uint8 height x width. Raises BehindCamera when any marker
    face is not in front of both cameras. Rendering is deterministic in
    (scene, rig, noise, seed). Markers that fall (partly) outside an image
    are clipped and flagged per keypoint in the truth table, not errors.
    """
    scene = list(scene)
    set_ids = [ms.set_id for ms, _ in scene]
    if len(set(set_ids)) != len(set_ids):
        raise ValueError("scene contains duplicate marker-set ids")

    entries = []
    cards_left, cards_right = [], []
    right_from_rig = rig.right_from_left
    for markerset, pose in scene:
        points = markerset.reference_points()
        labels = sorted(points)
        p_rig = pose.apply(np.array([points[k] for k in labels]))
        left_px, right_px = rig.project_stereo(p_rig)
        in_l = rig.left.contains(left_px)
        in_r = rig.right.contains(right_px)
        for i, label in enumerate(labels):
            entries.append(TruthEntry(
                set_id=markerset.set_id, label=label,
                position_rig=p_rig[i],
                left_px=left_px[i], right_px=right_px[i],
                left_in_frame=bool(in_l[i]), right_in_frame=bool(in_r[i])))
        for marker in markerset.markers:
            cards_left.append(_Card(marker, pose))
            cards_right.append(_Card(marker, compose(right_from_rig, pose)))

    left = np.full((rig.left.height, rig.left.width), BACKGROUND_LEVEL)
    right = np.full((rig.right.height, rig.right.width), BACKGROUND_LEVEL)
    for card in sorted(cards_left, key=lambda c: -c.depth):
        _paint_card(left, rig.left, card)
    for card in sorted(cards_right, key=lambda c: -c.depth):
        _paint_card(right, rig.right, card)

    rng = np.random.default_rng(seed)
    lo, hi = noise.intensity_gain_range
    gain_left = rng.uniform(lo, hi)
    gain_right = rng.uniform(lo, hi)
    left_img = _finish_eye(left, noise, gain_left, rng)
    right_img = _finish_eye(right, noise, gain_right, rng)
    return left_img, right_img, TruthTable(entries=tuple(entries))
