"""Pinhole cameras with two-term radial distortion, and a stereo rig.

Conventions: camera looks down +z, x right, y down, units mm. Pixel (0, 0)
is the center of the top-left pixel. The rig frame coincides with the left
camera frame; `left_from_right` is the right camera's pose expressed in the
left camera frame (it maps right-camera coordinates into left-camera ones).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from fidus.errors import BehindCamera, DistortionInversionFailure, IoFailure
from fidus.geometry import (
    RigidTransform,
    axis_angle_rotation,
    invert,
    quat_to_rotation,
    rotation_to_quat,
)

_MIN_DEPTH_MM = 1e-9


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics of one pinhole camera with radial distortion (k1, k2)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def distort(self, xy: np.ndarray) -> np.ndarray:
        """Apply radial distortion to normalized image coordinates."""
        xy = np.asarray(xy, dtype=float)
        r2 = np.sum(np.square(xy), axis=-1, keepdims=True)
        return xy * (1.0 + self.k1 * r2 + self.k2 * r2 * r2)

    def undistort(self, xy: np.ndarray, max_iter: int = 20,
                  tol: float = 1e-12) -> np.ndarray:
        """Invert the distortion model on normalized image coordinates.

        Newton iteration on the radial polynomial r·(1 + k1·r² + k2·r⁴).
        Raises DistortionInversionFailure if any point has not converged
        after `max_iter` rounds (e.g. outside the invertible radius).
        """
        distorted = np.asarray(xy, dtype=float)
        if self.k1 == 0.0 and self.k2 == 0.0:
            return distorted.copy()
        rd = np.sqrt(np.sum(np.square(distorted), axis=-1))
        r = rd.copy()
        resid = np.full_like(rd, np.inf)
        for _ in range(max_iter):
            r2 = r * r
            g = r * (1.0 + self.k1 * r2 + self.k2 * r2 * r2)
            dg = 1.0 + 3.0 * self.k1 * r2 + 5.0 * self.k2 * r2 * r2
            resid = g - rd
            if np.all(np.abs(resid) <= tol * np.maximum(rd, 1.0)):
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(np.abs(dg) > 1e-12, resid / dg, 0.0)
            r = np.maximum(r - step, 0.0)
        else:
            worst = float(np.max(np.abs(resid)))
            raise DistortionInversionFailure(
                f"distortion inversion stalled at residual {worst:.3e} "
                f"(tolerance {tol:.1e}, {max_iter} iterations)")
        scale = np.ones_like(rd)
        nonzero = rd > 0
        scale[nonzero] = r[nonzero] / rd[nonzero]
        return distorted * scale[..., None]

    def pixel_to_normalized(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return (px - (self.cx, self.cy)) / (self.fx, self.fy)

    def normalized_to_pixel(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return xy * (self.fx, self.fy) + (self.cx, self.cy)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Project (..., 3) camera-frame points to (..., 2) pixels.

        Raises BehindCamera if any point is at or behind the image plane.
        """
        pts = np.asarray(points_cam, dtype=float)
        z = pts[..., 2]
        if np.any(z < _MIN_DEPTH_MM):
            raise BehindCamera(
                f"point depth {float(np.min(z)):.6g} mm is not in front of the camera")
        xy = pts[..., :2] / z[..., None]
        return self.normalized_to_pixel(self.distort(xy))

    def unproject(self, px: np.ndarray) -> np.ndarray:
        """Unit ray directions (camera frame) through the given pixels."""
        xy = self.undistort(self.pixel_to_normalized(px))
        d = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def contains(self, px: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Elementwise test that pixels lie inside the image bounds."""
        px = np.asarray(px, dtype=float)
        return ((px[..., 0] >= margin) & (px[..., 0] <= self.width - 1 - margin)
                & (px[..., 1] >= margin) & (px[..., 1] <= self.height - 1 - margin))


@dataclass(frozen=True)
class StereoRig:
    """Two rigidly coupled cameras. The left camera frame is the rig frame."""

    left: CameraModel
    right: CameraModel
    left_from_right: RigidTransform  # right camera pose in the left frame

    def __post_init__(self):
        if np.linalg.norm(self.left_from_right.translation) <= 0:
            raise ValueError("stereo baseline must be positive")

    @property
    def right_from_left(self) -> RigidTransform:
        return invert(self.left_from_right)

    @property
    def baseline_mm(self) -> float:
        return float(np.linalg.norm(self.left_from_right.translation))

    def project_stereo(self, points_rig: np.ndarray):
        """Project rig-frame points into both eyes: (left_px, right_px)."""
        pts = np.asarray(points_rig, dtype=float)
        return (self.left.project(pts),
                self.right.project(self.right_from_left.apply(pts)))

    def rays(self, left_px: np.ndarray, right_px: np.ndarray):
        """Rig-frame rays for matched pixel pairs.

        Returns (left_origin, left_dirs, right_origin, right_dirs); origins
        are single 3-vectors, directions are unit and per pixel.
        """
        left_dirs = self.left.unproject(left_px)
        right_dirs = self.right.unproject(right_px) @ self.left_from_right.rotation.T
        return (np.zeros(3), left_dirs,
                self.left_from_right.translation.copy(), right_dirs)


def default_rig(width: int = 640, height: int = 480, focal: float = 350.0,
                baseline_mm: float = 100.0, convergence_deg: float = 15.0,
                k1: float = -0.06, k2: float = 0.004) -> StereoRig:
    """Compact toed-in stereo rig.

    The right camera sits `baseline_mm` along +x of the left camera and is
    yawed so the two optical axes converge in front of the rig at the given
    full angle.
    """
    cam = CameraModel(width=width, height=height, fx=focal, fy=focal,
                      cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, k1=k1, k2=k2)
    # Yaw the right camera so its forward axis gains a negative-x component,
    # pointing back toward the midline.
    rot_left_from_right = axis_angle_rotation(
        np.array([0.0, 1.0, 0.0]), -np.deg2rad(convergence_deg))
    return StereoRig(left=cam, right=cam,
                     left_from_right=RigidTransform(
                         rotation=rot_left_from_right,
                         translation=np.array([baseline_mm, 0.0, 0.0])))


# --- calibration file --------------------------------------------------------

FORMAT_TAG = "fidus-stereorig-v1"


def _camera_doc(cam: CameraModel) -> dict:
    return {
        "image_size": [cam.width, cam.height],
        "focal_px": [cam.fx, cam.fy],
        "principal_point_px": [cam.cx, cam.cy],
        "radial_distortion": [cam.k1, cam.k2],
    }


def _camera_from_doc(doc: dict) -> CameraModel:
    return CameraModel(width=int(doc["image_size"][0]),
                       height=int(doc["image_size"][1]),
                       fx=float(doc["focal_px"][0]), fy=float(doc["focal_px"][1]),
                       cx=float(doc["principal_point_px"][0]),
                       cy=float(doc["principal_point_px"][1]),
                       k1=float(doc["radial_distortion"][0]),
                       k2=float(doc["radial_distortion"][1]))


def save_rig(rig: StereoRig, path) -> None:
    """Write a calibration file: per-eye intrinsics plus the right camera's
    pose in the left frame as a scalar-first unit quaternion and translation."""
    doc = {
        "format": FORMAT_TAG,
        "left": _camera_doc(rig.left),
        "right": _camera_doc(rig.right),
        "left_from_right": {
            "quaternion_wxyz": rotation_to_quat(rig.left_from_right.rotation).tolist(),
            "translation_mm": rig.left_from_right.translation.tolist(),
        },
    }
    try:
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write calibration file {path}: {exc}") from exc


def load_rig(path) -> StereoRig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise IoFailure(f"cannot read calibration file {path}: {exc}") from exc
    if doc.get("format") != FORMAT_TAG:
        raise ValueError(f"not a {FORMAT_TAG} file: {path}")
    ext = doc["left_from_right"]
    quat = np.array(ext["quaternion_wxyz"], dtype=float)
    return StereoRig(
        left=_camera_from_doc(doc["left"]),
        right=_camera_from_doc(doc["right"]),
        left_from_right=RigidTransform(
            rotation=quat_to_rotation(quat),
            translation=np.array(ext["translation_mm"], dtype=float)),
    )
