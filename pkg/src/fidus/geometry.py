"""Rigid-body transform algebra and rigid point-set registration.

Conventions used throughout the package:
  - A transform T = (R, t) maps a point x (mm) to R @ x + t.
  - Rotations are proper orthonormal 3x3 matrices (det = +1).
  - Quaternions are scalar-first (w, x, y, z) and unit norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, InsufficientPoints

_ORTHO_TOL = 1e-9
_RENORM_TRIGGER = 1e-12


def _orthonormality_drift(rotation: np.ndarray) -> float:
    return float(np.abs(rotation.T @ rotation - np.eye(3)).max())


def _project_to_rotation(matrix: np.ndarray) -> np.ndarray:
    """Nearest proper rotation in the Frobenius sense (sign-fixed SVD)."""
    u, _, vt = np.linalg.svd(matrix)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, 2] *= -1.0
        r = u @ vt
    return r


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3): a rotation followed by a translation, units mm."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if _orthonormality_drift(rot) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must be proper (det = +1)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quat(quat, translation) -> "RigidTransform":
        return RigidTransform(quat_to_rotation(np.asarray(quat, dtype=float)),
                              translation)

    def quat(self) -> np.ndarray:
        return rotation_to_quat(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4) or np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-9:
            raise ValueError("expected a homogeneous 4x4 matrix")
        return RigidTransform(m[:3, :3], m[:3, 3])


@dataclass(frozen=True)
class PoseEstimate:
    """A fitted pose with its fiducial registration error (RMS residual, mm)."""

    transform: RigidTransform
    fre: float
    points_used: int


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform mapping x to a(b(x)); re-orthonormalized if drift exceeds 1e-12."""
    rot = a.rotation @ b.rotation
    if _orthonormality_drift(rot) > _RENORM_TRIGGER:
        rot = _project_to_rotation(rot)
    return RigidTransform(rot, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rot = t.rotation.T
    return RigidTransform(rot, -(rot @ t.translation))


def rigid_fit(source: np.ndarray, target: np.ndarray) -> PoseEstimate:
    """Least-squares rigid registration of matched point pairs.

    Finds the transform T minimizing sum ||T(source_i) - target_i||^2 via SVD
    of the cross-covariance (Kabsch). `source` and `target` are (N, 3) arrays
    whose rows correspond pairwise; the result is independent of row order.

    Raises InsufficientPoints for N < 4 and DegenerateGeometry when the source
    points are coincident or collinear (planar sets are fine; a det = -1 SVD
    solution is repaired by flipping the smallest singular direction).
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError("source and target must have matching shapes")
    n = src.shape[0]
    if n < 4:
        raise InsufficientPoints(f"rigid_fit needs >= 4 point pairs, got {n}")

    src_centroid = src.mean(axis=0)
    tgt_centroid = tgt.mean(axis=0)
    src_c = src - src_centroid
    tgt_c = tgt - tgt_centroid

    spread = np.linalg.svd(src_c, compute_uv=False)
    if spread[1] <= 1e-8 * max(spread[0], 1.0):
        raise DegenerateGeometry("source points are collinear or coincident")

    h = src_c.T @ tgt_c
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = tgt_centroid - rot @ src_centroid

    transform = RigidTransform(_project_to_rotation(rot), trans)
    residuals = transform.apply(src) - tgt
    fre = float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))
    return PoseEstimate(transform=transform, fre=fre, points_used=n)


def fre_of(transform: RigidTransform, source: np.ndarray,
           target: np.ndarray) -> float:
    """RMS of ||T(source_i) - target_i|| over all matched pairs."""
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError("source and target must have matching shapes")
    if src.shape[0] == 0:
        raise InsufficientPoints("fre_of needs at least one point pair")
    residuals = transform.apply(src) - tgt
    return float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))


# --- rotation helpers -------------------------------------------------------

def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    q = np.asarray(q, dtype=float).reshape(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def axis_angle_rotation(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0:
        return np.eye(3)
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, degrees in [0, 180]."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rotation_distance_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotations, degrees."""
    return rotation_angle_deg(a @ b.T)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (normalized Gaussian quaternion)."""
    q = rng.normal(size=4)
    return quat_to_rotation(q / np.linalg.norm(q))


def random_transform(rng: np.random.Generator,
                     translation_scale: float = 100.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng),
                          rng.normal(scale=translation_scale, size=3))
