"""Per-image keypoint extraction.

Three passes pull labeled subpixel keypoints out of one grayscale image:
a global marker detection sweep, a geometry-guided second sweep for markers
the global pass missed, and a per-marker interior scan that harvests the
chessboard-style saddle points occurring naturally inside marker bit grids.
All positions are subpixel in original image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from fidus.errors import InsufficientSeedMarkers
from fidus.markers import CORNER, NODE, KeypointLabel, MarkerDictionary, MarkerSet

PATCH_SIZE = 64          # constant working size for interior-corner patches
_MATCH_RADIUS = 0.10 * PATCH_SIZE
_REFINE_HALF = 2         # 5x5 response-weighted centroid window
_LINE_HALF = round(PATCH_SIZE / 10)
_N_ORIENTATIONS = 8
_WARP_CELL_PX = 8        # decoding warp resolution per marker cell
_SUBPIX_CRITERIA = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_MAX_ITER,
                    40, 1e-3)


@dataclass(frozen=True)
class Detection:
    """One decoded marker: id plus its four outer corners.

    Corners are subpixel (4, 2) image coordinates in canonical order —
    corners[k] is the marker's physical corner k regardless of how the
    marker happens to be rotated in the image.
    """

    aruco_id: int
    corners: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "corners",
            np.asarray(self.corners, dtype=float).reshape(4, 2))


@dataclass(frozen=True)
class Keypoint2D:
    """A labeled subpixel image point with a detector response strength."""

    label: KeypointLabel
    position: np.ndarray
    response: float

    def __post_init__(self):
        object.__setattr__(
            self, "position",
            np.asarray(self.position, dtype=float).reshape(2))
        if self.response < 0:
            raise ValueError("response must be non-negative")


def _smooth(image: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    return cv2.GaussianBlur(image, (0, 0), sigma)


def _quad_candidates(binary: np.ndarray, min_side_px: float,
                     eps_fraction: float) -> list:
    """Convex quadrilateral outlines found in a binarized image."""
    contours, _ = cv2.findContours(binary, cv2.RETR_LIST,
                                   cv2.CHAIN_APPROX_SIMPLE)
    quads = []
    min_area = min_side_px * min_side_px
    for contour in contours:
        if cv2.contourArea(contour) < min_area:
            continue
        perimeter = cv2.arcLength(contour, True)
        approx = cv2.approxPolyDP(contour, eps_fraction * perimeter, True)
        if len(approx) != 4 or not cv2.isContourConvex(approx):
            continue
        quad = approx.reshape(4, 2).astype(float)
        sides = np.linalg.norm(np.roll(quad, -1, axis=0) - quad, axis=1)
        if sides.min() < min_side_px:
            continue
        # Clockwise order (image y grows downward, so positive shoelace
        # area already means clockwise on screen).
        x, y = quad[:, 0], quad[:, 1]
        if np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) < 0:
            quad = quad[::-1]
        quads.append(quad)
    return quads


def _decode_quad(image: np.ndarray, quad: np.ndarray,
                 dictionary: MarkerDictionary):
    """Read the bit grid inside a candidate quad; (id, rotation) or None."""
    n = dictionary.codes[0].shape[0]
    cells = n + 2
    size = cells * _WARP_CELL_PX
    dst = np.array([[0, 0], [size, 0], [size, size], [0, size]],
                   dtype=np.float32)
    h = cv2.getPerspectiveTransform(quad.astype(np.float32), dst)
    warped = cv2.warpPerspective(image, h, (size, size),
                                 flags=cv2.INTER_LINEAR)
    _, bw = cv2.threshold(warped, 0, 255,
                          cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    # Majority vote over the central 6x6 px of each 8x8 px cell.
    trim = 1
    votes_needed = (_WARP_CELL_PX - 2 * trim) ** 2 / 2.0
    blocks = (bw > 0).reshape(cells, _WARP_CELL_PX, cells, _WARP_CELL_PX)
    votes = blocks[:, trim:-trim, :, trim:-trim].sum(axis=(1, 3))
    grid = (votes > votes_needed).astype(np.uint8)
    border = np.concatenate([grid[0, :], grid[-1, :],
                             grid[1:-1, 0], grid[1:-1, -1]])
    if np.count_nonzero(border) > 2:
        return None
    return dictionary.match(grid[1:-1, 1:-1], max_hamming=1)


def _bilinear(image: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear image samples at float (..., 2) positions (clamped)."""
    h, w = image.shape
    x = np.clip(points[..., 0], 0.0, w - 1.001)
    y = np.clip(points[..., 1], 0.0, h - 1.001)
    x0 = x.astype(int)
    y0 = y.astype(int)
    fx = x - x0
    fy = y - y0
    img = image.astype(np.float64)
    return ((img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx) * (1 - fy)
            + (img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx) * fy)


_N_PROBES = 7


def _edge_lines(image: np.ndarray, quad: np.ndarray):
    """Fit the eight per-corner edge lines of a quad in one batch.

    Each corner owns two directed half-edges (toward the next corner and
    toward the previous one). Gradient-weighted subpixel crossings are
    sampled on a short segment near the corner — far enough from the tip to
    dodge corner rounding, close enough that lens-induced edge curvature
    stays negligible — and a total-least-squares line goes through them.
    Returns (points (8, 2), directions (8, 2), valid (8,)); rows k and
    4 + k belong to corner k.

    Only bright-to-dark transitions toward the quad interior count: the
    card's outer edge is always white quiet zone outside, black border
    inside, while the border ring's inner boundary runs the other way.
    Without the polarity gate a start corner a couple pixels inside the
    card can lock the fit onto that inner boundary.
    """
    interior = quad.mean(axis=0)
    starts = np.concatenate([quad, quad], axis=0)
    others = np.concatenate([np.roll(quad, -1, axis=0),
                             np.roll(quad, 1, axis=0)], axis=0)
    sides = others - starts
    lengths = np.linalg.norm(sides, axis=1)
    u = sides / lengths[:, None]
    n = np.stack([-u[:, 1], u[:, 0]], axis=-1)
    inward = np.einsum("ij,ij->i", n, interior[None, :] - starts) < 0.0
    n[inward] = -n[inward]

    t0 = np.maximum(2.5, 0.12 * lengths)
    # Short edges may be probed over most of their length: lens-induced
    # curvature only matters over long chords, and the extra spread is what
    # keeps the crossings statistically independent at small scale.
    span = np.where(lengths >= 30.0, 0.45, 0.72)
    t1 = np.maximum(t0 + 2.0, np.minimum(span * lengths, t0 + 14.0))
    steps = np.linspace(0.0, 1.0, _N_PROBES)
    ts = t0[:, None] + steps[None, :] * (t1 - t0)[:, None]
    base = starts[:, None, :] + ts[..., None] * u[:, None, :]
    # Keep probes off the marker's interior bit edges: the black border ring
    # is one cell (~length/7) wide, so small markers get a narrower window.
    reach = np.where(lengths >= 24.0, 3, 2)
    taps = np.arange(-3, 4, dtype=float)
    live = np.abs(taps)[None, :] <= reach[:, None]  # (8, taps)

    # Gradient-weighted centroid of the crossing along each probe,
    # re-centered twice: a crossing off the probe middle would otherwise be
    # pulled toward the window center by the truncated gradient profile.
    shift = np.zeros((8, _N_PROBES))
    good = np.ones((8, _N_PROBES), dtype=bool)
    for _ in range(3):
        probes = (base + shift[..., None] * n[:, None, :])[:, :, None, :] \
            + taps[None, None, :, None] * n[:, None, None, :]
        samples = _bilinear(image, probes)          # (8, probes, taps)
        weights = np.maximum(samples[..., :-2] - samples[..., 2:], 0.0)
        weights = weights * live[:, None, 1:-1]
        norm = weights.sum(axis=-1)
        good = norm > 1e-9
        delta = (weights * taps[None, None, 1:-1]).sum(axis=-1) \
            / np.maximum(norm, 1e-12)
        shift = shift + np.where(good, delta, 0.0)

    points = base + shift[..., None] * n[:, None, :]
    counts = good.sum(axis=1)
    valid = counts >= 3
    # Total-least-squares line fit per row, batched: masked-out probes are
    # zeroed after centering so they add nothing to the scatter.
    w = good[..., None].astype(float)
    centers = (points * w).sum(axis=1) / np.maximum(counts, 1)[:, None]
    centered = (points - centers[:, None, :]) * w
    _, _, vt = np.linalg.svd(centered)
    return centers, vt[:, 0], valid


def _refine_corners(image: np.ndarray, smoothed: np.ndarray,
                    corners: np.ndarray) -> np.ndarray:
    """Subpixel corners as intersections of the two adjacent edge lines.

    Two passes: the first reads the smoothed image, whose wide gradients
    tolerate the couple-pixel error of contour-approximation corners; the
    second reads the original image, whose steep edge transitions carry the
    fine position that smoothing would wash out.
    """
    refined = corners.astype(float).copy()
    for img in (smoothed, image):
        centers, directions, valid = _edge_lines(img, refined)
        new = refined.copy()
        for k in range(4):
            ka, kb = k, 4 + k
            if not (valid[ka] and valid[kb]):
                continue
            pa, da = centers[ka], directions[ka]
            pb, db = centers[kb], directions[kb]
            cross = da[0] * db[1] - da[1] * db[0]
            if abs(cross) < 1e-6:
                continue
            t = ((pb[0] - pa[0]) * db[1] - (pb[1] - pa[1]) * db[0]) / cross
            candidate = pa + t * da
            if np.linalg.norm(candidate - refined[k]) < 4.0:
                new[k] = candidate
        refined = new
    return refined


def _canonical_order(quad: np.ndarray, rotation: int) -> np.ndarray:
    return np.array([quad[(k + rotation) % 4] for k in range(4)])


def _outer_edge_polarity(smoothed: np.ndarray, quad: np.ndarray) -> bool:
    """True when the quad is darker just inside its edges than just outside.

    A marker's outer boundary always runs white quiet zone -> black border
    ring; checking that cheaply at the four edge midpoints discards the
    border ring's *inner* boundary (and most junk contours) before the
    expensive refine/decode work.
    """
    mids = 0.5 * (quad + np.roll(quad, -1, axis=0))
    center = quad.mean(axis=0)
    inward = center[None, :] - mids
    inward /= np.linalg.norm(inward, axis=1, keepdims=True)
    span = max(2.0, 0.08 * float(np.linalg.norm(
        quad[2] - quad[0])))
    inside = _bilinear(smoothed, mids + span * inward)
    outside = _bilinear(smoothed, mids - span * inward)
    return float(np.mean(inside - outside)) < 0.0


def _decode_and_keep(image: np.ndarray, quad: np.ndarray,
                     dictionary: MarkerDictionary, best: dict) -> bool:
    decoded = _decode_quad(image, quad, dictionary)
    if decoded is None:
        return False
    aruco_id, rotation = decoded
    ordered = _canonical_order(quad, rotation)
    area = cv2.contourArea(ordered.astype(np.float32))
    # Nested/duplicate quads of one marker: keep the largest outline.
    if aruco_id not in best or area > best[aruco_id][0]:
        best[aruco_id] = (area, ordered)
    return True


def detect_markers(image: np.ndarray, dictionary: MarkerDictionary,
                   min_side_px: float = 8.0,
                   eps_fraction: float = 0.04) -> list:
    """Find and decode every marker from the dictionary in one image.

    Returns a list of Detection, empty when nothing is found. The image is
    smoothed and binarized with a global Otsu threshold, candidate convex
    quads are unwarped and bit-sampled by cell majority, and codes within
    Hamming distance 1 of a unique dictionary entry are accepted. Corner
    order is canonicalized to the dictionary orientation and refined to
    subpixel with a gradient edge-line fit.
    """
    if image.dtype != np.uint8:
        raise ValueError("expected an 8-bit grayscale image")
    smoothed = _smooth(image)
    _, binary = cv2.threshold(smoothed, 0, 255,
                              cv2.THRESH_BINARY_INV + cv2.THRESH_OTSU)
    best: dict[int, tuple[float, np.ndarray]] = {}
    for quad in _quad_candidates(binary, min_side_px, eps_fraction):
        if not _outer_edge_polarity(smoothed, quad):
            continue
        # Corners are refined before decoding: contour vertices are off by
        # a pixel or two, which misplaces the whole bit-sampling grid when
        # a cell is only a few pixels wide. Decode reads the unsmoothed
        # image — at long range the detection blur would smear neighboring
        # bits together.
        refined = _refine_corners(image, smoothed, quad)
        _decode_and_keep(image, refined, dictionary, best)
    return [Detection(aruco_id=aruco_id, corners=best[aruco_id][1])
            for aruco_id in sorted(best)]


def _provisional_pose(found, markerset: MarkerSet, cam):
    """Rough set pose from already-found corners, for projection guidance."""
    object_pts = []
    image_pts = []
    for det in found:
        marker = markerset.marker(det.aruco_id)
        object_pts.append(marker.outer_corners_3d)
        image_pts.append(det.corners)
    object_pts = np.vstack(object_pts).astype(np.float64)
    image_pts = np.vstack(image_pts).astype(np.float64)
    camera_matrix = np.array([[cam.fx, 0, cam.cx],
                              [0, cam.fy, cam.cy],
                              [0, 0, 1.0]])
    dist = np.array([cam.k1, cam.k2, 0.0, 0.0])
    ok, rvec, tvec = cv2.solvePnP(object_pts, image_pts, camera_matrix,
                                  dist, flags=cv2.SOLVEPNP_IPPE)
    if not ok:
        ok, rvec, tvec = cv2.solvePnP(object_pts, image_pts, camera_matrix,
                                      dist, flags=cv2.SOLVEPNP_SQPNP)
    if not ok:
        return None
    return rvec, tvec, camera_matrix, dist


def redetect_markers(image: np.ndarray, found, markerset: MarkerSet,
                     cam, window_margin: float = 0.35,
                     min_side_px: float = 6.0) -> list:
    """Second, geometry-guided pass for markers the global sweep missed.

    Fits a provisional set pose to the markers already found, projects each
    missing marker's corners, and reruns quad detection inside the predicted
    window with a locally recomputed threshold. A recovered quad must decode
    (Hamming <= 1) to exactly the marker id expected at that location.
    Raises InsufficientSeedMarkers when fewer than two markers seed the pose.
    """
    found = list(found)
    if len(found) < 2:
        raise InsufficientSeedMarkers(
            f"redetection needs >= 2 seed markers, have {len(found)}")
    missing = sorted(markerset.aruco_ids - {d.aruco_id for d in found})
    if not missing:
        return []
    pose = _provisional_pose(found, markerset, cam)
    if pose is None:
        return []
    rvec, tvec, camera_matrix, dist = pose
    smoothed = _smooth(image)
    height, width = image.shape

    recovered = []
    for aruco_id in missing:
        marker = markerset.marker(aruco_id)
        projected, _ = cv2.projectPoints(marker.outer_corners_3d, rvec, tvec,
                                         camera_matrix, dist)
        projected = projected.reshape(4, 2)
        span = projected.max(axis=0) - projected.min(axis=0)
        pad = window_margin * float(span.max()) + 4.0
        x0 = int(np.floor(projected[:, 0].min() - pad))
        x1 = int(np.ceil(projected[:, 0].max() + pad))
        y0 = int(np.floor(projected[:, 1].min() - pad))
        y1 = int(np.ceil(projected[:, 1].max() + pad))
        x0, x1 = max(x0, 0), min(x1, width - 1)
        y0, y1 = max(y0, 0), min(y1, height - 1)
        if x1 - x0 < min_side_px or y1 - y0 < min_side_px:
            continue
        window = smoothed[y0:y1 + 1, x0:x1 + 1]
        _, binary = cv2.threshold(window, 0, 255,
                                  cv2.THRESH_BINARY_INV + cv2.THRESH_OTSU)
        best = None
        for quad in _quad_candidates(binary, min_side_px, 0.05):
            refined = _refine_corners(image, smoothed, quad + (x0, y0))
            decoded = _decode_quad(image, refined, markerset.dictionary)
            if decoded is None or decoded[0] != aruco_id:
                continue
            area = cv2.contourArea(refined.astype(np.float32))
            if best is None or area > best[0]:
                best = (area, _canonical_order(refined, decoded[1]))
        if best is not None:
            recovered.append(Detection(aruco_id=aruco_id, corners=best[1]))
    return recovered


# --- interior chessboard corners -------------------------------------------

def _make_profile_kernels():
    """Correlation kernels that average a patch along oriented half-lines.

    For each orientation, averaging bilinear samples at offsets t*u for
    t = 1.._LINE_HALF is a fixed sparse convolution; baking it into one
    kernel replaces dozens of per-call image warps.
    """
    size = 2 * (_LINE_HALF + 1) + 1
    center = size // 2
    pos = np.zeros((_N_ORIENTATIONS, size, size))
    neg = np.zeros_like(pos)
    for o in range(_N_ORIENTATIONS):
        theta = np.pi * o / _N_ORIENTATIONS
        ux, uy = np.cos(theta), np.sin(theta)
        for t in range(1, _LINE_HALF + 1):
            for kernel, sign in ((pos[o], -1.0), (neg[o], 1.0)):
                dx, dy = sign * t * ux, sign * t * uy
                ix, iy = int(np.floor(dx)), int(np.floor(dy))
                fx, fy = dx - ix, dy - iy
                kernel[center + iy, center + ix] += (1 - fx) * (1 - fy)
                kernel[center + iy, center + ix + 1] += fx * (1 - fy)
                kernel[center + iy + 1, center + ix] += (1 - fx) * fy
                kernel[center + iy + 1, center + ix + 1] += fx * fy
    pos /= _LINE_HALF
    neg /= _LINE_HALF
    return (tuple(_trim_kernel(pos[o]) for o in range(_N_ORIENTATIONS)),
            tuple(_trim_kernel(neg[o]) for o in range(_N_ORIENTATIONS)))


def _trim_kernel(kernel: np.ndarray):
    """Crop a mostly-zero kernel to its support, keeping the anchor inside."""
    center = kernel.shape[0] // 2
    ys, xs = np.nonzero(kernel)
    y0, y1 = min(ys.min(), center), max(ys.max(), center)
    x0, x1 = min(xs.min(), center), max(xs.max(), center)
    return (np.ascontiguousarray(kernel[y0:y1 + 1, x0:x1 + 1]),
            (int(center - x0), int(center - y0)))


_PROFILE_KERNELS = _make_profile_kernels()


def _line_profiles(patch: np.ndarray):
    """Mean intensity along oriented segments through every pixel.

    Returns (full-line means, positive-half means, negative-half means),
    each with shape (orientations, K, K). The full-line mean is assembled
    from the two half filters plus the center pixel, so only the cropped
    half kernels are ever convolved.
    """
    k = patch.shape[0]
    depth = cv2.CV_32F if patch.dtype == np.float32 else cv2.CV_64F
    pos = np.empty((_N_ORIENTATIONS, k, k), dtype=patch.dtype)
    neg = np.empty_like(pos)
    for o, ((kp, ap), (kn, an)) in enumerate(zip(*_PROFILE_KERNELS)):
        pos[o] = cv2.filter2D(patch, depth, kp, anchor=ap,
                              borderType=cv2.BORDER_REPLICATE)
        neg[o] = cv2.filter2D(patch, depth, kn, anchor=an,
                              borderType=cv2.BORDER_REPLICATE)
    n_taps = 2 * _LINE_HALF + 1
    full = (pos + neg) * (_LINE_HALF / n_taps) + patch * (1.0 / n_taps)
    return full, pos, neg


def corner_response(patch: np.ndarray) -> np.ndarray:
    """Saddle-point response map over a grayscale patch.

    At each pixel, intensities are averaged along line segments through the
    pixel at a fan of orientations. Checkerboard saddles maximize the
    contrast between perpendicular line pairs while keeping each individual
    line balanced about the pixel; straight edges and single-square corners
    unbalance some line and are suppressed. Response is non-negative, in
    intensity units of the (float-normalized) patch.
    """
    work = patch.astype(np.float32)
    if patch.dtype == np.uint8:
        work = work / np.float32(255.0)
    full, pos, neg = _line_profiles(work)
    half_pairs = _N_ORIENTATIONS // 2
    cross = np.max(np.abs(full[:half_pairs] - full[half_pairs:]), axis=0)
    imbalance = np.max(np.abs(pos - neg), axis=0)
    return np.maximum(cross - imbalance, 0.0)


def _local_maxima(response: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    peak = ndimage.maximum_filter(response, size=3, mode="nearest")
    ys, xs = np.nonzero((response >= peak) & (response > floor))
    return np.stack([xs, ys], axis=-1).astype(float)


def _weighted_centroid(response: np.ndarray, center: np.ndarray) -> np.ndarray:
    k = response.shape[0]
    cx, cy = int(round(center[0])), int(round(center[1]))
    x0, x1 = max(cx - _REFINE_HALF, 0), min(cx + _REFINE_HALF, k - 1)
    y0, y1 = max(cy - _REFINE_HALF, 0), min(cy + _REFINE_HALF, k - 1)
    window = response[y0:y1 + 1, x0:x1 + 1]
    total = window.sum()
    if total <= 0:
        return center
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    return np.array([(window * gx).sum() / total,
                     (window * gy).sum() / total])


def chessboard_corners(image: np.ndarray, detection: Detection,
                       markerset: MarkerSet) -> list:
    """Interior chessboard-node keypoints for one detected marker.

    Crops the marker's bounding quad, rescales to the constant patch size,
    and looks for saddle-response maxima near each node position predicted
    by the four-corner homography. Accepted maxima are refined to the
    response-weighted centroid and mapped back to image coordinates. Nodes
    without a qualifying maximum are silently omitted.
    """
    marker = markerset.marker(detection.aruco_id)
    node_coords = marker.node_grid_coords()
    if node_coords.shape[0] == 0:
        return []
    height, width = image.shape

    corners = detection.corners
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    margin = 0.08 * float((hi - lo).max()) + 2.0
    x0 = max(int(np.floor(lo[0] - margin)), 0)
    y0 = max(int(np.floor(lo[1] - margin)), 0)
    x1 = min(int(np.ceil(hi[0] + margin)), width - 1)
    y1 = min(int(np.ceil(hi[1] + margin)), height - 1)
    if x1 - x0 < 4 or y1 - y0 < 4:
        return []
    crop = image[y0:y1 + 1, x0:x1 + 1]
    # cv2.resize aligns pixel centers: patch_xy = (crop_xy + 0.5)*scale - 0.5
    scale = np.array([PATCH_SIZE / crop.shape[1],
                      PATCH_SIZE / crop.shape[0]])
    patch = cv2.resize(crop, (PATCH_SIZE, PATCH_SIZE),
                       interpolation=cv2.INTER_CUBIC)

    response = corner_response(patch)
    maxima = _local_maxima(response)
    if maxima.shape[0] == 0:
        return []

    g = marker.grid_cells
    grid_corners = np.array([[0, 0], [g, 0], [g, g], [0, g]],
                            dtype=np.float32)
    patch_corners = ((corners - (x0, y0) + 0.5) * scale - 0.5) \
        .astype(np.float32)
    homography = cv2.getPerspectiveTransform(grid_corners, patch_corners)
    guesses = cv2.perspectiveTransform(
        node_coords.reshape(-1, 1, 2).astype(np.float32),
        homography).reshape(-1, 2)

    # Tie the acceptance radius to the node pitch so a distant (small) marker
    # cannot hand a prediction to the *neighboring* saddle, which sits about
    # one cell away and would silently shift the keypoint by a full cell.
    sides = np.linalg.norm(np.roll(patch_corners, -1, axis=0) - patch_corners,
                           axis=1)
    cell_patch_px = float(sides.mean()) / g
    radius = max(1.5, min(_MATCH_RADIUS, 0.45 * cell_patch_px))

    matches = []
    for index, guess in enumerate(guesses):
        dists = np.linalg.norm(maxima - guess, axis=1)
        nearest = int(np.argmin(dists))
        if dists[nearest] <= radius:
            matches.append((float(dists[nearest]), index, nearest))
    # One response peak serves at most one node: closest prediction wins.
    matches.sort()
    taken_peaks: set[int] = set()
    accepted = []
    for _, index, nearest in matches:
        if nearest in taken_peaks:
            continue
        taken_peaks.add(nearest)
        refined = _weighted_centroid(response, maxima[nearest])
        accepted.append((index, refined,
                         float(response[int(round(maxima[nearest][1])),
                                        int(round(maxima[nearest][0]))])))
    if not accepted:
        return []
    accepted.sort(key=lambda entry: entry[0])
    # Final gradient polish. A saddle point is point-symmetric, so the fit
    # is unbiased (unlike at the marker's outer corners) — but its window
    # must stay inside the four cells meeting at the saddle. When image
    # cells are too small for that, polish on the rescaled patch instead,
    # where the marker occupies a fixed size and cells are always wide.
    cell_img_px = cell_patch_px / float(scale.mean())
    rough_patch = np.array([p for (_, p, _) in accepted])
    if cell_img_px < 6.0:
        buf = rough_patch.astype(np.float32).reshape(-1, 1, 2)
        cv2.cornerSubPix(patch, buf, (3, 3), (-1, -1), _SUBPIX_CRITERIA)
        fine = buf.reshape(-1, 2).astype(float)
        keep = np.linalg.norm(fine - rough_patch, axis=1) \
            < 3.0 * float(scale.mean())
        chosen = np.where(keep[:, None], fine, rough_patch)
        final = (chosen + 0.5) / scale - 0.5 + (x0, y0)
    else:
        rough_img = (rough_patch + 0.5) / scale - 0.5 + (x0, y0)
        buf = rough_img.astype(np.float32).reshape(-1, 1, 2)
        cv2.cornerSubPix(image, buf, (3, 3), (-1, -1), _SUBPIX_CRITERIA)
        fine = buf.reshape(-1, 2).astype(float)
        keep = np.linalg.norm(fine - rough_img, axis=1) < 3.0
        final = np.where(keep[:, None], fine, rough_img)

    return [Keypoint2D(label=KeypointLabel(marker.aruco_id, NODE, index),
                       position=position, response=response_value)
            for (index, _, response_value), position in zip(accepted, final)]


def extract_keypoints(image: np.ndarray, markerset: MarkerSet,
                      cam=None, chessboard: bool = True,
                      detections=None) -> list:
    """Full single-image pass: detect, re-detect, and augment with nodes.

    Outer corners carry response 0.0 (they are geometric anchors, not
    saddle detections). Redetection runs only when a camera model is given
    and at least two markers seeded the first pass. `chessboard=False`
    skips interior-node extraction, leaving corners only. A pre-computed
    `detections` list (from detect_markers on this image with this set's
    dictionary) skips the sweep, letting several sets share one pass.
    """
    if detections is None:
        detections = detect_markers(image, markerset.dictionary)
    detections = [d for d in detections if d.aruco_id in markerset.aruco_ids]
    if cam is not None and len(detections) >= 2:
        detections = detections + redetect_markers(image, detections,
                                                   markerset, cam)
    keypoints = []
    for det in detections:
        for k in range(4):
            keypoints.append(Keypoint2D(
                label=KeypointLabel(det.aruco_id, CORNER, k),
                position=det.corners[k], response=0.0))
        if chessboard:
            keypoints.extend(chessboard_corners(image, det, markerset))
    return keypoints
