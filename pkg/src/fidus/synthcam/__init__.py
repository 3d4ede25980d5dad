"""Synthetic stereo camera bench: pinhole models, marker rendering, probe
trajectories and ultrasound phantoms, with exact ground-truth bookkeeping."""

from fidus.synthcam.camera import (
    CameraModel,
    StereoRig,
    default_rig,
    load_rig,
    save_rig,
)
from fidus.synthcam.render import (
    TruthEntry,
    TruthTable,
    render_stereo,
)
from fidus.synthcam.phantom import (
    EllipsoidSpec,
    PhantomSpec,
    SphereSpec,
    synth_us_slice,
)
from fidus.synthcam.trajectory import (
    ANGLE_BINS_DEG,
    DISTANCE_BINS_CM,
    DriftState,
    NoiseModel,
    ScenePose,
    TrajectoryConfig,
    drift_step_sigma_for_rms,
    facing_pose,
    perturb_localization,
    simulate_trajectory,
)

__all__ = [
    "ANGLE_BINS_DEG",
    "CameraModel",
    "DISTANCE_BINS_CM",
    "DriftState",
    "EllipsoidSpec",
    "NoiseModel",
    "PhantomSpec",
    "ScenePose",
    "SphereSpec",
    "StereoRig",
    "TrajectoryConfig",
    "TruthEntry",
    "TruthTable",
    "default_rig",
    "drift_step_sigma_for_rms",
    "facing_pose",
    "load_rig",
    "perturb_localization",
    "render_stereo",
    "save_rig",
    "simulate_trajectory",
    "synth_us_slice",
]
