"""Stereo fiducial tracking, pose chains, and freehand 3D ultrasound
reconstruction, with a synthetic stereo camera bench for end-to-end testing."""

from fidus.errors import (
    AnchorNotVisible,
    BehindCamera,
    DegenerateGeometry,
    DistortionInversionFailure,
    EmptyInput,
    FidusError,
    FrameMismatch,
    InsufficientPoints,
    InsufficientSeedMarkers,
    IoFailure,
    MalformedHeader,
    MarkerOutOfFrame,
    MixedReferenceFrames,
    ParallelRays,
    SphereNotFound,
    TrackingLost,
)
from fidus.geometry import (
    PoseEstimate,
    RigidTransform,
    compose,
    fre_of,
    invert,
    rigid_fit,
)

__all__ = [
    "AnchorNotVisible",
    "BehindCamera",
    "DegenerateGeometry",
    "DistortionInversionFailure",
    "EmptyInput",
    "FidusError",
    "FrameMismatch",
    "InsufficientPoints",
    "InsufficientSeedMarkers",
    "IoFailure",
    "MalformedHeader",
    "MarkerOutOfFrame",
    "MixedReferenceFrames",
    "ParallelRays",
    "SphereNotFound",
    "TrackingLost",
    "PoseEstimate",
    "RigidTransform",
    "compose",
    "fre_of",
    "invert",
    "rigid_fit",
]

__version__ = "0.1.0"
