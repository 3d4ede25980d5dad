"""Frame-tagged transform chains for placing tracked ultrasound slices.

The moving parts: the headset camera rig (CAMERA) self-localizes against the
room (WORLD); the probe's marker set (PROBE) and a static reference marker
set (ANCHOR) are tracked in the camera frame; a fixed calibration relates the
probe markers to the transducer tip (TIP) and the tip to the ultrasound image
plane (IMAGE). Every public chain here checks frame adjacency, because a
reversed composition is the one bug this algebra cannot otherwise surface.

Naming: a transform t_a_b maps coordinates expressed in frame b to frame a.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from fidus.errors import FrameMismatch, IoFailure, MalformedHeader
from fidus.geometry import RigidTransform, compose, invert


class FrameTag(enum.Enum):
    """Coordinate frames a transform can connect."""

    CAMERA = "camera"   # stereo rig frame (left eye)
    WORLD = "world"     # headset's self-localization map
    ANCHOR = "anchor"   # static reference marker set
    PROBE = "probe"     # marker set rigidly attached to the probe
    TIP = "tip"         # transducer tip
    IMAGE = "image"     # ultrasound image plane, mm units, z = 0

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class FramedTransform:
    """A rigid transform labeled with the frames it connects.

    Maps points expressed in `from_frame` into `to_frame`.
    """

    transform: RigidTransform
    to_frame: FrameTag
    from_frame: FrameTag

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.transform.apply(points)


def compose_framed(a: FramedTransform, b: FramedTransform) -> FramedTransform:
    """a . b, defined only when b lands in the frame a starts from."""
    if a.from_frame is not b.to_frame:
        raise FrameMismatch(
            f"cannot chain {a.to_frame}<-{a.from_frame} with "
            f"{b.to_frame}<-{b.from_frame}")
    return FramedTransform(transform=compose(a.transform, b.transform),
                           to_frame=a.to_frame, from_frame=b.from_frame)


def invert_framed(t: FramedTransform) -> FramedTransform:
    return FramedTransform(transform=invert(t.transform),
                           to_frame=t.from_frame, from_frame=t.to_frame)


def _expect(t: FramedTransform, to_frame: FrameTag,
            from_frame: FrameTag, name: str) -> None:
    if t.to_frame is not to_frame or t.from_frame is not from_frame:
        raise FrameMismatch(
            f"{name} must map {to_frame}<-{from_frame}, "
            f"got {t.to_frame}<-{t.from_frame}")


@dataclass(frozen=True)
class TipCalibration:
    """Factory-style probe calibration: markers -> tip -> image plane.

    t_marker_tip locates the transducer tip relative to the probe's marker
    set; t_tip_image maps image-plane millimeter coordinates into the tip
    frame; pixel_spacing converts pixel indices to image-plane millimeters.
    """

    t_marker_tip: RigidTransform
    pixel_spacing: tuple
    t_tip_image: RigidTransform

    def __post_init__(self):
        p_w, p_h = self.pixel_spacing
        if p_w <= 0 or p_h <= 0:
            raise ValueError("pixel_spacing must be positive componentwise")

    @property
    def marker_from_tip(self) -> FramedTransform:
        return FramedTransform(self.t_marker_tip, FrameTag.PROBE, FrameTag.TIP)

    @property
    def tip_from_image(self) -> FramedTransform:
        return FramedTransform(self.t_tip_image, FrameTag.TIP, FrameTag.IMAGE)


def identity_calibration(pixel_spacing=(1.0, 1.0)) -> TipCalibration:
    """Calibration whose tip frame coincides with the image plane."""
    return TipCalibration(t_marker_tip=RigidTransform.identity(),
                          pixel_spacing=tuple(pixel_spacing),
                          t_tip_image=RigidTransform.identity())


def pixel_to_image_mm(pixel: np.ndarray, calib: TipCalibration) -> np.ndarray:
    """Pixel indices (..., 2) -> image-plane points (..., 3) with z = 0."""
    px = np.asarray(pixel, dtype=float)
    scaled = px * np.array(calib.pixel_spacing)
    return np.concatenate([scaled, np.zeros(scaled.shape[:-1] + (1,))],
                          axis=-1)


def tip_pixel_to_3d(pixel: np.ndarray, calib: TipCalibration) -> np.ndarray:
    """Ultrasound pixel coordinates -> 3D points in the tip frame (mm)."""
    return calib.t_tip_image.apply(pixel_to_image_mm(pixel, calib))


def slice_pose_world(t_world_cam: FramedTransform,
                     t_cam_marker: FramedTransform,
                     calib: TipCalibration) -> FramedTransform:
    """Tip pose in the world frame: the real-time slice placement chain."""
    _expect(t_world_cam, FrameTag.WORLD, FrameTag.CAMERA, "t_world_cam")
    _expect(t_cam_marker, FrameTag.CAMERA, FrameTag.PROBE, "t_cam_marker")
    return compose_framed(compose_framed(t_world_cam, t_cam_marker),
                          calib.marker_from_tip)


def slice_pose_anchor(t_cam_anchor: FramedTransform,
                      t_cam_marker: FramedTransform,
                      calib: TipCalibration) -> FramedTransform:
    """Tip pose in the anchor frame; never touches the world pose."""
    _expect(t_cam_anchor, FrameTag.CAMERA, FrameTag.ANCHOR, "t_cam_anchor")
    _expect(t_cam_marker, FrameTag.CAMERA, FrameTag.PROBE, "t_cam_marker")
    return compose_framed(
        compose_framed(invert_framed(t_cam_anchor), t_cam_marker),
        calib.marker_from_tip)


def pixel_to_anchor(t_cam_anchor: FramedTransform,
                    t_cam_marker: FramedTransform,
                    calib: TipCalibration, pixel: np.ndarray) -> np.ndarray:
    """Ultrasound pixels (..., 2) -> 3D points (..., 3) in the anchor frame.

    Routes tracking through the static reference markers only, so headset
    self-localization error cannot enter the result.
    """
    chain = compose_framed(slice_pose_anchor(t_cam_anchor, t_cam_marker,
                                             calib),
                           calib.tip_from_image)
    return chain.apply(pixel_to_image_mm(pixel, calib))


def pixel_to_world(t_world_cam: FramedTransform,
                   t_cam_marker: FramedTransform,
                   calib: TipCalibration, pixel: np.ndarray) -> np.ndarray:
    """Ultrasound pixels (..., 2) -> 3D points (..., 3) in the world frame.

    Any error in the headset's world pose lands rigidly on the output.
    """
    chain = compose_framed(slice_pose_world(t_world_cam, t_cam_marker, calib),
                           calib.tip_from_image)
    return chain.apply(pixel_to_image_mm(pixel, calib))


# --- calibration file ------------------------------------------------------

_CALIB_FORMAT = "fidus-tipcalib-v1"


def _transform_to_json(t: RigidTransform) -> dict:
    return {"quaternion_wxyz": [float(v) for v in t.quat()],
            "translation_mm": [float(v) for v in t.translation]}


def _transform_from_json(obj: dict) -> RigidTransform:
    return RigidTransform.from_quat(np.array(obj["quaternion_wxyz"]),
                                    np.array(obj["translation_mm"]))


def save_tip_calibration(calib: TipCalibration, path) -> None:
    payload = {
        "format": _CALIB_FORMAT,
        "t_marker_tip": _transform_to_json(calib.t_marker_tip),
        "t_tip_image": _transform_to_json(calib.t_tip_image),
        "pixel_spacing_mm": [float(v) for v in calib.pixel_spacing],
    }
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write tip calibration: {exc}") from exc


def load_tip_calibration(path) -> TipCalibration:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read tip calibration: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"tip calibration is not valid JSON: {exc}")
    if payload.get("format") != _CALIB_FORMAT:
        raise MalformedHeader(
            f"unexpected tip calibration format {payload.get('format')!r}")
    try:
        return TipCalibration(
            t_marker_tip=_transform_from_json(payload["t_marker_tip"]),
            pixel_spacing=tuple(payload["pixel_spacing_mm"]),
            t_tip_image=_transform_from_json(payload["t_tip_image"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"bad tip calibration field: {exc}")
