"""Freehand 3D ultrasound reconstruction.

Tracked 2D slices are splatted into a voxel grid: every pixel is mapped
through the tip calibration and its slice pose into the chosen reference
frame (world or anchor) and accumulated into the nearest voxel as a running
sum and hit count. Mean intensities are recovered as sum/count; voxels no
pixel ever touched stay undefined rather than being filled in, so pose error
remains visible in the result instead of being smoothed away.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from fidus.chains import FrameTag, TipCalibration
from fidus.errors import (EmptyInput, IoFailure, MalformedHeader,
                          MixedReferenceFrames, SphereNotFound)
from fidus.geometry import RigidTransform, compose

_REFERENCE_TAGS = (FrameTag.WORLD, FrameTag.ANCHOR)


@dataclass(frozen=True)
class UsFrame:
    """One 2D ultrasound image: 8-bit intensities plus physical metadata.

    intensities[row, col] holds the sample at pixel (x=col, y=row);
    pixel_spacing is (p_w, p_h) mm per pixel along x and y.
    """

    width: int
    height: int
    pixel_spacing: tuple
    intensities: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        p_w, p_h = self.pixel_spacing
        if p_w <= 0 or p_h <= 0:
            raise ValueError("pixel_spacing must be positive")
        if self.intensities.shape != (self.height, self.width):
            raise ValueError("intensities must have shape (height, width)")
        if self.intensities.dtype != np.uint8:
            raise ValueError("intensities must be 8-bit")


@dataclass(frozen=True)
class PoseSample:
    """One timestamped tip pose from a tracking stream."""

    timestamp: float
    pose: RigidTransform
    reference: FrameTag

    def __post_init__(self):
        if self.reference not in _REFERENCE_TAGS:
            raise ValueError("reference must be WORLD or ANCHOR")


@dataclass(frozen=True)
class TrackedSlice:
    """An ultrasound frame paired with the tip pose that placed it."""

    frame: UsFrame
    pose: RigidTransform
    reference: FrameTag

    def __post_init__(self):
        if self.reference not in _REFERENCE_TAGS:
            raise ValueError("reference must be WORLD or ANCHOR")


@dataclass
class VoxelVolume:
    """Accumulated volume: per-voxel intensity sum and hit count.

    Voxel (ix, iy, iz) is centered at origin + index * voxel_size; its mean
    intensity sum/count is defined only where count > 0.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple
    sum: np.ndarray = field(repr=False)
    count: np.ndarray = field(repr=False)

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise ValueError("dims must be positive")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.sum.shape != tuple(self.dims) or \
                self.count.shape != tuple(self.dims):
            raise ValueError("sum/count arrays must match dims")

    @staticmethod
    def empty(origin, voxel_size: float, dims) -> "VoxelVolume":
        dims = tuple(int(d) for d in dims)
        return VoxelVolume(origin=np.asarray(origin, dtype=float),
                           voxel_size=float(voxel_size), dims=dims,
                           sum=np.zeros(dims), count=np.zeros(dims, np.int64))

    def defined_mask(self) -> np.ndarray:
        return self.count > 0

    def values(self) -> np.ndarray:
        """Mean intensity per voxel; NaN where undefined."""
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.sum / self.count
        out[self.count == 0] = np.nan
        return out

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        return self.origin + np.asarray(indices, dtype=float) * self.voxel_size

    def same_grid(self, other: "VoxelVolume") -> bool:
        return (self.dims == other.dims
                and self.voxel_size == other.voxel_size
                and np.array_equal(self.origin, other.origin))

    def merge(self, other: "VoxelVolume") -> None:
        """Fold another partial volume on the same grid into this one."""
        if not self.same_grid(other):
            raise ValueError("cannot merge volumes on different grids")
        self.sum += other.sum
        self.count += other.count


def _slice_chain(s: TrackedSlice, calib: TipCalibration) -> RigidTransform:
    """Image-plane mm -> reference frame for one slice."""
    return compose(s.pose, calib.t_tip_image)


def _pixel_grid_mm(frame: UsFrame) -> np.ndarray:
    xs = np.arange(frame.width) * frame.pixel_spacing[0]
    ys = np.arange(frame.height) * frame.pixel_spacing[1]
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy, np.zeros_like(gx)], axis=-1).reshape(-1, 3)


def _footprint_corners(s: TrackedSlice, calib: TipCalibration) -> np.ndarray:
    w, h = s.frame.width, s.frame.height
    p_w, p_h = s.frame.pixel_spacing
    corners = np.array([[0.0, 0.0, 0.0],
                        [(w - 1) * p_w, 0.0, 0.0],
                        [0.0, (h - 1) * p_h, 0.0],
                        [(w - 1) * p_w, (h - 1) * p_h, 0.0]])
    return _slice_chain(s, calib).apply(corners)


def compound(slices, calib: TipCalibration, voxel_size: float,
             bounds=None) -> VoxelVolume:
    """Splat tracked slices into a voxel volume by nearest-voxel binning.

    With bounds=None the grid is the axis-aligned bounding box of all slice
    footprints padded by one voxel, and every pixel lands in some voxel
    (total count == total pixels). An explicit bounds=(origin, dims) pins the
    grid — useful for accumulating comparable volumes from different pose
    streams — and pixels falling outside it are silently dropped.
    """
    slices = list(slices)
    if not slices:
        raise EmptyInput("no slices to compound")
    references = {s.reference for s in slices}
    if len(references) > 1:
        raise MixedReferenceFrames(
            "slices mix reference frames: "
            + ", ".join(sorted(str(r) for r in references)))

    if bounds is None:
        corners = np.vstack([_footprint_corners(s, calib) for s in slices])
        lo = corners.min(axis=0)
        hi = corners.max(axis=0)
        origin = lo - voxel_size
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 3
    else:
        origin, dims = bounds
        origin = np.asarray(origin, dtype=float)
        dims = tuple(int(d) for d in dims)

    volume = VoxelVolume.empty(origin, voxel_size, dims)
    n_voxels = int(np.prod(volume.dims))
    for s in slices:
        points = _slice_chain(s, calib).apply(_pixel_grid_mm(s.frame))
        idx = np.rint((points - volume.origin) / voxel_size).astype(np.int64)
        keep = np.all((idx >= 0) & (idx < np.array(volume.dims)), axis=1)
        idx = idx[keep]
        intensities = s.frame.intensities.reshape(-1).astype(np.float64)[keep]
        flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]),
                                    volume.dims)
        volume.sum += np.bincount(flat, weights=intensities,
                                  minlength=n_voxels).reshape(volume.dims)
        volume.count += np.bincount(flat, minlength=n_voxels) \
            .reshape(volume.dims)
    return volume


def pair_streams(frames, poses, max_skew: float):
    """Match each frame to its nearest-in-time pose.

    Returns (tracked slices, dropped frame count); a frame is dropped when no
    pose lies within max_skew seconds of it. Both streams must be sorted by
    timestamp and the poses must share one reference frame.
    """
    frames = list(frames)
    poses = list(poses)
    frame_ts = np.array([f.timestamp for f in frames])
    pose_ts = np.array([p.timestamp for p in poses])
    if np.any(np.diff(frame_ts) < 0) or np.any(np.diff(pose_ts) < 0):
        raise ValueError("streams must be timestamp-sorted")
    references = {p.reference for p in poses}
    if len(references) > 1:
        raise MixedReferenceFrames("pose stream mixes reference frames")

    slices = []
    dropped = 0
    if not poses:
        return slices, len(frames)
    right = np.searchsorted(pose_ts, frame_ts)
    for f, r in zip(frames, right):
        candidates = [i for i in (r - 1, r) if 0 <= i < len(poses)]
        best = min(candidates, key=lambda i: abs(pose_ts[i] - f.timestamp))
        if abs(pose_ts[best] - f.timestamp) <= max_skew:
            slices.append(TrackedSlice(frame=f, pose=poses[best].pose,
                                       reference=poses[best].reference))
        else:
            dropped += 1
    return slices, dropped


# --- phantom-fidelity metrics ----------------------------------------------

@dataclass(frozen=True)
class SphereReport:
    """How well one reconstructed sphere matches its ground truth."""

    centroid_error_mm: float
    radius_error_mm: float
    fill_fraction: float
    measured_centroid: np.ndarray
    measured_radius_mm: float
    voxel_count: int


def volume_metrics(volume: VoxelVolume, phantom) -> list:
    """Per-sphere fidelity report for a reconstructed phantom volume.

    For each sphere: threshold defined voxels at half the sphere's intensity,
    pick the connected component nearest the true center, and compare its
    unweighted voxel centroid and shell radius (largest centroid-to-voxel
    distance) against truth. Fill fraction counts how many voxels inside the
    true sphere are defined at all. Ellipsoid shapes contribute image content
    but are not scored.
    """
    if not np.any(volume.count > 0):
        raise SphereNotFound("volume has no defined voxels")
    values = volume.values()
    defined = volume.defined_mask()
    structure = ndimage.generate_binary_structure(3, 3)

    reports = []
    for sphere in phantom.spheres:
        center = np.asarray(sphere.center, dtype=float)
        mask = defined & (values >= 0.5 * sphere.intensity)
        labels, n_labels = ndimage.label(mask, structure=structure)
        best_label, best_gap = None, np.inf
        for label in range(1, n_labels + 1):
            pts = volume.voxel_centers(np.argwhere(labels == label))
            gap = float(np.min(np.linalg.norm(pts - center, axis=1)))
            if gap < best_gap:
                best_label, best_gap = label, gap
        if best_label is None or best_gap > 3.0 * sphere.radius:
            raise SphereNotFound(
                f"no thresholded component within {3.0 * sphere.radius} mm "
                f"of sphere at {center}")
        pts = volume.voxel_centers(np.argwhere(labels == best_label))
        centroid = pts.mean(axis=0)
        shell_radius = float(np.max(np.linalg.norm(pts - centroid, axis=1)))

        span = np.ceil(sphere.radius / volume.voxel_size).astype(int) + 1
        center_idx = np.rint((center - volume.origin) / volume.voxel_size)
        lo = np.maximum(center_idx - span, 0).astype(int)
        hi = np.minimum(center_idx + span + 1, volume.dims).astype(int)
        block = np.argwhere(np.ones(tuple(hi - lo), dtype=bool)) + lo
        inside = (np.linalg.norm(volume.voxel_centers(block) - center, axis=1)
                  <= sphere.radius)
        block = block[inside]
        n_inside = len(block)
        n_defined = int(np.sum(defined[block[:, 0], block[:, 1], block[:, 2]]))

        reports.append(SphereReport(
            centroid_error_mm=float(np.linalg.norm(centroid - center)),
            radius_error_mm=abs(shell_radius - sphere.radius),
            fill_fraction=n_defined / n_inside if n_inside else 0.0,
            measured_centroid=centroid,
            measured_radius_mm=shell_radius,
            voxel_count=int(np.sum(labels == best_label))))
    return reports


# --- volume file ------------------------------------------------------------

_VOLUME_MAGIC = b"USVOL1\n"
_VOLUME_ENCODING = "sum:<f8,count:<u4,x-fastest"


def write_volume(volume: VoxelVolume, path) -> None:
    """Write a volume: ASCII header, then raw sum and count arrays."""
    if volume.count.max(initial=0) >= 2 ** 32:
        raise IoFailure("voxel count overflows the 32-bit file encoding")
    header = (
        _VOLUME_MAGIC.decode()
        + "origin " + " ".join(repr(float(v)) for v in volume.origin) + "\n"
        + "voxel_size " + repr(float(volume.voxel_size)) + "\n"
        + "dims " + " ".join(str(int(d)) for d in volume.dims) + "\n"
        + "encoding " + _VOLUME_ENCODING + "\n"
        + "end\n")
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode())
            fh.write(np.ravel(volume.sum, order="F")
                     .astype("<f8").tobytes())
            fh.write(np.ravel(volume.count, order="F")
                     .astype("<u4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write volume: {exc}") from exc


def read_volume(path) -> VoxelVolume:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read volume: {exc}") from exc
    if not data.startswith(_VOLUME_MAGIC):
        raise MalformedHeader("bad volume magic")
    try:
        header_end = data.index(b"end\n", len(_VOLUME_MAGIC))
    except ValueError:
        raise MalformedHeader("volume header is not terminated")
    fields = {}
    for line in data[len(_VOLUME_MAGIC):header_end].decode().splitlines():
        key, _, rest = line.partition(" ")
        fields[key] = rest
    try:
        origin = np.array([float(v) for v in fields["origin"].split()])
        voxel_size = float(fields["voxel_size"])
        dims = tuple(int(v) for v in fields["dims"].split())
        encoding = fields["encoding"]
    except (KeyError, ValueError) as exc:
        raise MalformedHeader(f"bad volume header field: {exc}")
    if len(origin) != 3 or len(dims) != 3 or min(dims) <= 0:
        raise MalformedHeader("volume header has malformed origin/dims")
    if encoding != _VOLUME_ENCODING:
        raise MalformedHeader(f"unsupported volume encoding {encoding!r}")

    n = dims[0] * dims[1] * dims[2]
    payload = data[header_end + len(b"end\n"):]
    if len(payload) != n * 8 + n * 4:
        raise MalformedHeader(
            f"payload holds {len(payload)} bytes, expected {n * 8 + n * 4}")
    sums = np.frombuffer(payload[:n * 8], dtype="<f8") \
        .reshape(dims, order="F").astype(np.float64)
    counts = np.frombuffer(payload[n * 8:], dtype="<u4") \
        .reshape(dims, order="F").astype(np.int64)
    return VoxelVolume(origin=origin, voxel_size=voxel_size, dims=dims,
                       sum=sums, count=counts)


# --- pose-stream and frame-stream files --------------------------------------

def write_pose_stream(samples, path) -> None:
    """One line per pose: timestamp, quaternion wxyz, translation mm, tag."""
    try:
        with open(path, "w") as fh:
            for s in samples:
                qw, qx, qy, qz = (repr(float(v)) for v in s.pose.quat())
                tx, ty, tz = (repr(float(v)) for v in s.pose.translation)
                fh.write(f"{repr(float(s.timestamp))} {qw} {qx} {qy} {qz} "
                         f"{tx} {ty} {tz} {s.reference.value}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write pose stream: {exc}") from exc


def read_pose_stream(path) -> list:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read pose stream: {exc}") from exc
    samples = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 9:
            raise MalformedHeader(
                f"pose line {line_no} has {len(parts)} fields, expected 9")
        try:
            numbers = [float(v) for v in parts[:8]]
            reference = FrameTag(parts[8])
        except ValueError as exc:
            raise MalformedHeader(f"pose line {line_no}: {exc}")
        pose = RigidTransform.from_quat(np.array(numbers[1:5]),
                                        np.array(numbers[5:8]))
        samples.append(PoseSample(timestamp=numbers[0], pose=pose,
                                  reference=reference))
    return samples


_MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = "fidus-usframes-v1"


def write_frame_stream(frames, directory) -> None:
    """Write frames as raw 8-bit row-major images plus a JSON manifest."""
    entries = []
    try:
        os.makedirs(directory, exist_ok=True)
        for i, f in enumerate(frames):
            name = f"frame_{i:06d}.raw"
            with open(os.path.join(directory, name), "wb") as fh:
                fh.write(f.intensities.tobytes())
            entries.append({"file": name,
                            "timestamp": float(f.timestamp),
                            "width": int(f.width), "height": int(f.height),
                            "pixel_spacing_mm": [float(v)
                                                 for v in f.pixel_spacing]})
        with open(os.path.join(directory, _MANIFEST_NAME), "w") as fh:
            json.dump({"format": _MANIFEST_FORMAT, "frames": entries}, fh,
                      indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write frame stream: {exc}") from exc


def read_frame_stream(directory) -> list:
    try:
        with open(os.path.join(directory, _MANIFEST_NAME)) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read frame manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"frame manifest is not valid JSON: {exc}")
    if manifest.get("format") != _MANIFEST_FORMAT:
        raise MalformedHeader(
            f"unexpected manifest format {manifest.get('format')!r}")
    frames = []
    for entry in manifest.get("frames", []):
        try:
            width, height = int(entry["width"]), int(entry["height"])
            spacing = tuple(entry["pixel_spacing_mm"])
            timestamp = float(entry["timestamp"])
            with open(os.path.join(directory, entry["file"]), "rb") as fh:
                raw = fh.read()
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeader(f"bad manifest entry: {exc}")
        except OSError as exc:
            raise IoFailure(f"cannot read frame file: {exc}") from exc
        if len(raw) != width * height:
            raise MalformedHeader(
                f"{entry['file']}: {len(raw)} bytes for "
                f"{width}x{height} image")
        frames.append(UsFrame(
            width=width, height=height, pixel_spacing=spacing,
            intensities=np.frombuffer(raw, dtype=np.uint8)
            .reshape(height, width).copy(),
            timestamp=timestamp))
    return frames
