"""Scene-pose sampling over distance/angle bins, plus sensor noise knobs and
a random-walk model of headset self-localization drift.

Scenes place a rigid pair of marker sets in front of the stereo rig. The
viewing distance is measured from the rig's mid-baseline point along the
average of the two optical axes; the viewing angle is the tilt of the marker
plane away from facing that axis head-on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fidus.geometry import RigidTransform, axis_angle_rotation, compose

# Distance rows and angle columns of the standard benchmark protocol.
DISTANCE_BINS_CM = ((15, 25), (25, 35), (35, 45), (45, 55))
ANGLE_BINS_DEG = ((0, 15), (15, 30), (30, 45))

# Geometry of the default rig the poses are aimed at: mid-baseline origin and
# the bisector of the two optical axes (15 degree convergence).
_AIM_ORIGIN = np.array([50.0, 0.0, 0.0])
_HALF_CONV_RAD = math.radians(7.5)
_AIM_DIR = np.array([-math.sin(_HALF_CONV_RAD), 0.0, math.cos(_HALF_CONV_RAD)])


@dataclass(frozen=True)
class NoiseModel:
    """Rendering and localization noise parameters.

    pixel_sigma is the standard deviation of additive Gaussian image noise in
    normalized intensity units (image range 0..1), applied before blurring;
    at the default marker contrast one unit of it induces roughly comparable
    subpixel keypoint jitter in px. blur_radius is the Gaussian optical blur
    sigma in px. intensity_gain_range bounds a uniform per-eye exposure gain.
    localization_sigma_t (mm) and localization_sigma_r (degrees) are the
    per-step sizes of the self-localization random walk; see
    drift_step_sigma_for_rms for tuning them to a stationary RMS target.
    """

    pixel_sigma: float = 0.0
    blur_radius: float = 0.0
    intensity_gain_range: tuple = (1.0, 1.0)
    localization_sigma_t: float = 0.0
    localization_sigma_r: float = 0.0

    def __post_init__(self):
        lo, hi = self.intensity_gain_range
        if min(self.pixel_sigma, self.blur_radius, lo, hi,
               self.localization_sigma_t, self.localization_sigma_r) < 0:
            raise ValueError("noise parameters must be non-negative")
        if lo > hi:
            raise ValueError("intensity_gain_range must be (low, high)")


@dataclass(frozen=True)
class TrajectoryConfig:
    """Binned pose sampling: distance bins (cm) x angle bins (degrees)."""

    distance_bins_cm: tuple = DISTANCE_BINS_CM
    angle_bins_deg: tuple = ANGLE_BINS_DEG
    frames_per_bin: int = 100
    seed: int = 0
    jitter: float = 1.0  # 0 = every pose exactly at its bin center

    def __post_init__(self):
        if self.frames_per_bin < 1:
            raise ValueError("frames_per_bin must be >= 1")
        if not 0.0 <= self.jitter <= 1.0:
            raise ValueError("jitter must lie in [0, 1]")
        for bins in (self.distance_bins_cm, self.angle_bins_deg):
            spans = sorted((float(a), float(b)) for a, b in bins)
            for (a, b) in spans:
                if b <= a:
                    raise ValueError(f"empty bin ({a}, {b})")
            for (_, b), (a2, _) in zip(spans, spans[1:]):
                if a2 < b:
                    raise ValueError("bins overlap")

    @property
    def total_frames(self) -> int:
        return (len(self.distance_bins_cm) * len(self.angle_bins_deg)
                * self.frames_per_bin)


@dataclass(frozen=True)
class ScenePose:
    """One benchmark frame: both marker-set poses in the rig frame."""

    frame_index: int
    distance_bin_cm: tuple
    angle_bin_deg: tuple
    distance_mm: float
    angle_deg: float
    pose_a: RigidTransform
    pose_b: RigidTransform


def _facing_rotation() -> np.ndarray:
    """Marker-set axes (columns) for a set squarely facing the rig."""
    z = _AIM_DIR
    x = np.array([1.0, 0.0, 0.0])
    x = x - np.dot(x, z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


_FACING = _facing_rotation()


def facing_pose(distance_mm: float, lateral_mm=(0.0, 0.0),
                tilt_deg: float = 0.0, tilt_azimuth_deg: float = 0.0,
                roll_deg: float = 0.0) -> RigidTransform:
    """A marker-set pose presented to the rig at a given range.

    The set sits `distance_mm` out along the rig's aiming axis, shifted by
    `lateral_mm` within the facing plane, rolled about its own normal by
    `roll_deg`, then tipped `tilt_deg` away from head-on about an in-plane
    axis at `tilt_azimuth_deg`. Zero angles face the rig squarely.
    """
    center = (_AIM_ORIGIN + distance_mm * _AIM_DIR
              + lateral_mm[0] * _FACING[:, 0] + lateral_mm[1] * _FACING[:, 1])
    tilt_az = math.radians(tilt_azimuth_deg)
    tilt_axis = np.array([math.cos(tilt_az), math.sin(tilt_az), 0.0])
    rot = (_FACING
           @ axis_angle_rotation(np.array([0.0, 0.0, 1.0]),
                                 math.radians(roll_deg))
           @ axis_angle_rotation(tilt_axis, math.radians(tilt_deg)))
    return RigidTransform(rotation=rot, translation=center)


def _pose_a(cfg: TrajectoryConfig, frame_index: int, d_bin, a_bin,
            offset_t: np.ndarray):
    rng = np.random.default_rng([cfg.seed, frame_index])
    draws = rng.random(6)
    j = cfg.jitter
    d_lo, d_hi = 10.0 * d_bin[0], 10.0 * d_bin[1]  # cm -> mm
    a_lo, a_hi = a_bin
    distance = 0.5 * (d_lo + d_hi) + j * (draws[0] - 0.5) * (d_hi - d_lo)
    angle = 0.5 * (a_lo + a_hi) + j * (draws[1] - 0.5) * (a_hi - a_lo)
    tilt_azimuth = j * draws[2] * 2.0 * math.pi
    roll = j * draws[3] * 2.0 * math.pi
    lateral_r = j * 0.05 * distance * math.sqrt(draws[4])
    lateral_az = draws[5] * 2.0 * math.pi

    # In-plane lateral jitter, perpendicular to the aiming direction.
    center = (_AIM_ORIGIN + distance * _AIM_DIR
              + lateral_r * (math.cos(lateral_az) * _FACING[:, 0]
                             + math.sin(lateral_az) * _FACING[:, 1]))

    tilt_axis = np.array([math.cos(tilt_azimuth), math.sin(tilt_azimuth), 0.0])
    rot = (_FACING
           @ axis_angle_rotation(np.array([0.0, 0.0, 1.0]), roll)
           @ axis_angle_rotation(tilt_axis, math.radians(angle)))
    # Straddle the pair midpoint so both sets share the field of view.
    pose = RigidTransform(rotation=rot,
                          translation=center - rot @ (0.5 * offset_t))
    return pose, float(distance), float(angle)


def simulate_trajectory(cfg: TrajectoryConfig,
                        markerset_pair_offset: RigidTransform) -> list:
    """Deterministic benchmark scenes for every (distance, angle) bin.

    Each scene holds poses for two marker sets whose relative pose is exactly
    `markerset_pair_offset` (pose_b = pose_a . offset). Per-frame randomness
    is keyed by (seed, frame_index), so results do not depend on how frames
    are later distributed over workers.
    """
    scenes = []
    frame_index = 0
    for d_bin in cfg.distance_bins_cm:
        for a_bin in cfg.angle_bins_deg:
            for _ in range(cfg.frames_per_bin):
                pose_a, distance, angle = _pose_a(
                    cfg, frame_index, d_bin, a_bin,
                    markerset_pair_offset.translation)
                scenes.append(ScenePose(
                    frame_index=frame_index,
                    distance_bin_cm=tuple(d_bin), angle_bin_deg=tuple(a_bin),
                    distance_mm=distance, angle_deg=angle,
                    pose_a=pose_a,
                    pose_b=compose(pose_a, markerset_pair_offset)))
                frame_index += 1
    return scenes


# --- self-localization drift ---------------------------------------------

DRIFT_DECAY = 0.99  # pull-to-zero factor keeping the walk bounded


@dataclass(frozen=True)
class DriftState:
    """Current random-walk offsets: translation (mm) and rotation vector (rad)."""

    translation: np.ndarray
    rotation_vector: np.ndarray

    @staticmethod
    def initial() -> "DriftState":
        return DriftState(np.zeros(3), np.zeros(3))


def drift_step_sigma_for_rms(target_rms: float,
                             decay: float = DRIFT_DECAY) -> float:
    """Per-step sigma so the walk's stationary 3D RMS equals target_rms."""
    return target_rms * math.sqrt(1.0 - decay * decay)


def _random_step(rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Isotropic step: Gaussian magnitude along a uniform random axis."""
    if sigma == 0.0:
        return np.zeros(3)
    axis = rng.normal(size=3)
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    return rng.normal(0.0, sigma) * axis


def perturb_localization(t_world_cam: RigidTransform, noise: NoiseModel,
                         state: DriftState, rng: np.random.Generator):
    """Advance the drift walk one step and apply it to a world-camera pose.

    The perturbation is expressed in the world frame (left-composed), the
    way self-localization error corrupts a headset's reported pose. Returns
    (perturbed pose, new state); the caller owns the state and generator, so
    independent simulations never share hidden mutation.
    """
    new_t = (DRIFT_DECAY * state.translation
             + _random_step(rng, noise.localization_sigma_t))
    new_r = (DRIFT_DECAY * state.rotation_vector
             + _random_step(rng, math.radians(noise.localization_sigma_r)))
    new_state = DriftState(translation=new_t, rotation_vector=new_r)
    angle = float(np.linalg.norm(new_r))
    rot = (np.eye(3) if angle == 0.0
           else axis_angle_rotation(new_r / angle, angle))
    wobble = RigidTransform(rotation=rot, translation=new_t.copy())
    return compose(wobble, t_world_cam), new_state
