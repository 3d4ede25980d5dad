"""Exception hierarchy shared by all fidus modules."""


class FidusError(Exception):
    """Base class for all library errors."""


class InsufficientPoints(FidusError):
    """Too few point correspondences for the requested operation."""


class DegenerateGeometry(FidusError):
    """Point configuration does not constrain a rigid transform (collinear or coincident)."""


class BehindCamera(FidusError):
    """Attempted to project a point at or behind the camera plane (z <= 0)."""


class DistortionInversionFailure(FidusError):
    """Iterative undistortion did not converge within the iteration budget."""


class InsufficientSeedMarkers(FidusError):
    """Secondary marker detection needs at least two already-found markers."""


class ParallelRays(FidusError):
    """Stereo rays are parallel; the closest-approach gap is undefined."""


class TrackingLost(FidusError):
    """Fewer than four triangulated keypoints survived; no pose can be fit."""


class FrameMismatch(FidusError):
    """Transforms with non-adjacent coordinate frames were composed."""


class MixedReferenceFrames(FidusError):
    """Slices in one reconstruction must share a single reference frame."""


class EmptyInput(FidusError):
    """An operation requiring at least one element received none."""


class SphereNotFound(FidusError):
    """No reconstructed component found near the expected sphere location."""


class MarkerOutOfFrame(FidusError):
    """A marker face projects (partially) outside the image."""


class AnchorNotVisible(FidusError):
    """The anchor marker set could not be tracked in a frame."""


class IoFailure(FidusError):
    """Underlying file read/write failed."""


class MalformedHeader(FidusError):
    """A volume/stream file header failed validation."""
