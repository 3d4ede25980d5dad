"""Stereo tracking back half: match, triangulate, filter, fit.

Keypoints from the two eyes are paired by label, each pair is triangulated
as the closest-approach midpoint of the two viewing rays (pairs whose rays
miss each other by more than a tolerance are dropped), the 3D cloud is
screened against the marker set's known geometry by mean pairwise-distance
deviation, and the pose is chosen among confidence-ranked candidate subsets
by fiducial registration error. All 3D quantities are mm in the left-camera
frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fidus.detect import detect_markers, extract_keypoints
from fidus.errors import DegenerateGeometry, InsufficientPoints, TrackingLost
from fidus.geometry import PoseEstimate, rigid_fit
from fidus.markers import KeypointLabel, MarkerSet
from fidus.synthcam.camera import StereoRig

CONFIDENCE_EPSILON_MM = 1e-3
DEFAULT_GAP_TOLERANCE_MM = 1.0
DEFAULT_OUTLIER_THRESHOLD_MM = 0.75
MIN_FIT_POINTS = 4


@dataclass(frozen=True)
class LabeledPoint3D:
    """A triangulated keypoint: position in the left-camera frame, mm.

    Confidence is 1 / (1e-3 mm + ray gap); a tighter ray crossing ranks
    higher. Only the ordering is ever consumed downstream.
    """

    label: KeypointLabel
    position: np.ndarray
    confidence: float

    def __post_init__(self):
        object.__setattr__(
            self, "position",
            np.asarray(self.position, dtype=float).reshape(3))


@dataclass(frozen=True)
class Discarded:
    """A keypoint pair rejected at triangulation; `gap` is the ray miss, mm."""

    label: KeypointLabel
    gap: float


@dataclass(frozen=True)
class OutlierReport:
    """Outcome of the pairwise-distance screen.

    `scores[i]` is the mean absolute deviation (mm) between point i's
    observed distances to every other point and the marker set's reference
    distances; `removed` lists exactly the labels whose score exceeded
    `threshold`.
    """

    scores: np.ndarray
    removed: tuple
    threshold: float


@dataclass(frozen=True)
class TrackingParams:
    """Knobs for the stereo pipeline, defaulting to the protocol constants."""

    gap_tolerance_mm: float = DEFAULT_GAP_TOLERANCE_MM
    outlier_threshold_mm: float = DEFAULT_OUTLIER_THRESHOLD_MM
    max_candidate_drops: int | None = None  # None: min(5, c2 - 4), at least 1
    use_chessboard: bool = True


def match_keypoints(left: list, right: list) -> list:
    """Pair keypoints seen by both eyes, by identical label.

    Labels must be unique within each eye's list. Unmatched keypoints are
    dropped. Pairs come back sorted by label for reproducibility.
    """
    by_label = {kp.label: kp for kp in right}
    if len(by_label) != len(right):
        raise ValueError("duplicate labels in right keypoint list")
    seen = set()
    pairs = []
    for kp in left:
        if kp.label in seen:
            raise ValueError("duplicate labels in left keypoint list")
        seen.add(kp.label)
        mate = by_label.get(kp.label)
        if mate is not None:
            pairs.append((kp, mate))
    pairs.sort(key=lambda pair: pair[0].label)
    return pairs


def triangulate(pair, rig: StereoRig,
                tolerance: float = DEFAULT_GAP_TOLERANCE_MM):
    """Midpoint triangulation of one matched keypoint pair.

    Unprojects both pixels into the left-camera frame and finds the unique
    pair of closest points on the two rays; the midpoint is the 3D estimate
    and the separation is the ray gap. Returns a LabeledPoint3D when the
    gap is within `tolerance` (inclusive), else a Discarded carrying the
    gap. Parallel rays have no closest pair and are discarded with an
    infinite gap.
    """
    left_kp, right_kp = pair
    o1, d1, o2, d2 = rig.rays(left_kp.position, right_kp.position)

    b = float(d1 @ d2)
    denom = 1.0 - b * b  # a = c = 1 for unit rays
    if denom < 1e-12:
        return Discarded(label=left_kp.label, gap=np.inf)
    w = o2 - o1
    d = float(d1 @ w)
    e = float(d2 @ w)
    t1 = (d - b * e) / denom
    t2 = (b * d - e) / denom
    p1 = o1 + t1 * d1
    p2 = o2 + t2 * d2
    gap = float(np.linalg.norm(p1 - p2))
    if gap > tolerance:
        return Discarded(label=left_kp.label, gap=gap)
    return LabeledPoint3D(label=left_kp.label, position=0.5 * (p1 + p2),
                          confidence=1.0 / (CONFIDENCE_EPSILON_MM + gap))


def pairwise_deviation_scores(points: list, markerset: MarkerSet) -> np.ndarray:
    """Per-point mean |observed - reference| over all pairwise distances, mm.

    Rigid motion of the whole cloud leaves every score untouched, so a
    clean cloud scores all zeros in any pose; a single displaced point
    inflates its own score by roughly its displacement while spreading only
    displacement/(n-1) onto each other point.
    """
    if len(points) < 2:
        raise InsufficientPoints(
            f"pairwise screening needs >= 2 points, got {len(points)}")
    observed = np.stack([p.position for p in points])
    reference = np.stack([markerset.position_of(p.label) for p in points])
    d_obs = np.linalg.norm(observed[:, None, :] - observed[None, :, :], axis=-1)
    d_ref = np.linalg.norm(reference[:, None, :] - reference[None, :, :], axis=-1)
    dev = np.abs(d_obs - d_ref)
    np.fill_diagonal(dev, 0.0)
    return dev.sum(axis=1) / (len(points) - 1)


def outlier_filter(points: list, markerset: MarkerSet,
                   threshold: float = DEFAULT_OUTLIER_THRESHOLD_MM):
    """Single-pass geometric consistency screen.

    Scores every point with `pairwise_deviation_scores` and removes those
    strictly above `threshold`, all in one pass (survivors are not
    re-scored). Returns (retained points, OutlierReport).
    """
    scores = pairwise_deviation_scores(points, markerset)
    keep = scores <= threshold
    retained = [p for p, k in zip(points, keep) if k]
    removed = tuple(p.label for p, k in zip(points, keep) if not k)
    return retained, OutlierReport(scores=scores, removed=removed,
                                   threshold=threshold)


def fit_pose_candidates(points: list, markerset: MarkerSet,
                        m: int) -> PoseEstimate:
    """Pose by FRE-ranked search over confidence-ranked subsets.

    Sorts points by confidence descending and fits the full set plus each
    prefix that drops the k least-confident points, k = 1..m (prefixes
    shorter than 4 points are skipped). The candidate with the lowest
    fiducial registration error wins; ties go to the candidate using more
    points. Prefixes whose reference points are collinear cannot anchor a
    pose and are skipped; if every candidate is degenerate the error
    propagates.
    """
    c2 = len(points)
    if c2 < MIN_FIT_POINTS:
        raise InsufficientPoints(
            f"pose fitting needs >= {MIN_FIT_POINTS} points, got {c2}")
    if m < 1:
        raise ValueError(f"candidate count m must be >= 1, got {m}")
    ranked = sorted(points, key=lambda p: -p.confidence)
    target = np.stack([p.position for p in ranked])
    source = np.stack([markerset.position_of(p.label) for p in ranked])

    best = None
    for n in [c2] + [c2 - k for k in range(1, m + 1) if c2 - k >= MIN_FIT_POINTS]:
        try:
            candidate = rigid_fit(source[:n], target[:n])
        except DegenerateGeometry:
            continue
        if best is None or candidate.fre < best.fre:
            best = candidate
    if best is None:
        raise DegenerateGeometry(
            "every candidate subset is collinear or coincident")
    return best


def default_candidate_drops(c2: int) -> int:
    """Default search depth: up to five drops, never below the 4-point floor."""
    return max(1, min(5, c2 - MIN_FIT_POINTS))


def pose_from_keypoints(left_kps: list, right_kps: list, rig: StereoRig,
                        markerset: MarkerSet,
                        params: TrackingParams = TrackingParams()):
    """Match -> triangulate -> screen -> fit; the post-detection pipeline.

    Returns (PoseEstimate, diagnostics dict). Raises TrackingLost when
    fewer than 4 triangulated points survive the screen.
    """
    pairs = match_keypoints(left_kps, right_kps)
    points = []
    discards = []
    for pair in pairs:
        result = triangulate(pair, rig, tolerance=params.gap_tolerance_mm)
        if isinstance(result, LabeledPoint3D):
            points.append(result)
        else:
            discards.append(result)
    c1 = len(points)
    if c1 < MIN_FIT_POINTS:
        raise TrackingLost(
            f"only {c1} triangulated keypoints (need {MIN_FIT_POINTS})")
    retained, report = outlier_filter(
        points, markerset, threshold=params.outlier_threshold_mm)
    c2 = len(retained)
    if c2 < MIN_FIT_POINTS:
        raise TrackingLost(
            f"only {c2} keypoints after outlier screen (need {MIN_FIT_POINTS})")
    m = params.max_candidate_drops
    if m is None:
        m = default_candidate_drops(c2)
    estimate = fit_pose_candidates(retained, markerset, m)
    diagnostics = {
        "matched_pairs": len(pairs),
        "triangulated": c1,
        "retained": c2,
        "discarded_gaps": discards,
        "outlier_report": report,
    }
    return estimate, diagnostics


def track_frame(left_image: np.ndarray, right_image: np.ndarray,
                rig: StereoRig, markerset: MarkerSet,
                params: TrackingParams = TrackingParams()) -> PoseEstimate:
    """Full stereo frame -> pose of the marker set in the left-camera frame."""
    left_kps = extract_keypoints(left_image, markerset, cam=rig.left,
                                 chessboard=params.use_chessboard)
    right_kps = extract_keypoints(right_image, markerset, cam=rig.right,
                                  chessboard=params.use_chessboard)
    estimate, _ = pose_from_keypoints(left_kps, right_kps, rig, markerset,
                                      params)
    return estimate


def track_sets(left_image: np.ndarray, right_image: np.ndarray,
               rig: StereoRig, markersets: list,
               params: TrackingParams = TrackingParams()) -> dict:
    """Track several marker sets in one stereo frame.

    Returns {set id: PoseEstimate} containing only the sets that tracked;
    sets that lose tracking (too few surviving points, or survivors too
    degenerate to anchor a pose) are simply absent. Sets sharing one
    dictionary object also share the raw detection sweep, so tracking two
    sets in the same frame costs little more than tracking one.
    """
    left_cache: dict[int, list] = {}
    right_cache: dict[int, list] = {}
    poses = {}
    for ms in markersets:
        key = id(ms.dictionary)
        if key not in left_cache:
            left_cache[key] = detect_markers(left_image, ms.dictionary)
            right_cache[key] = detect_markers(right_image, ms.dictionary)
        left_kps = extract_keypoints(left_image, ms, cam=rig.left,
                                     chessboard=params.use_chessboard,
                                     detections=left_cache[key])
        right_kps = extract_keypoints(right_image, ms, cam=rig.right,
                                      chessboard=params.use_chessboard,
                                      detections=right_cache[key])
        try:
            poses[ms.set_id], _ = pose_from_keypoints(
                left_kps, right_kps, rig, ms, params)
        except (TrackingLost, DegenerateGeometry):
            continue
    return poses
