"""Scripted benchmark experiments over the synthetic stereo bench.

Four protocols, all deterministic in their configured seeds:

* known-offset tracking accuracy, binned by viewing distance and angle;
* a marker-count x chessboard ablation of the same protocol;
* freehand sweep reconstruction compared between the world-referenced and
  anchor-referenced pose chains under self-localization drift;
* wall-clock timing of the keypoint-extraction and pose stages.

Per-frame randomness is keyed by (seed, frame index), so results are
identical however frames are distributed over worker processes.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from fidus.chains import FrameTag, FramedTransform, TipCalibration, \
    slice_pose_anchor, slice_pose_world
from fidus.detect import detect_markers, extract_keypoints
from fidus.errors import DegenerateGeometry, TrackingLost
from fidus.geometry import RigidTransform, axis_angle_rotation, compose, \
    invert, rotation_distance_deg
from fidus.markers import MarkerSet, standard_set
from fidus.recon import SphereReport, TrackedSlice, compound, volume_metrics
from fidus.stereo import TrackingParams, pose_from_keypoints
from fidus.synthcam import NoiseModel, PhantomSpec, SphereSpec, \
    TrajectoryConfig, default_rig, facing_pose, render_stereo, \
    simulate_trajectory, synth_us_slice
from fidus.synthcam.trajectory import DriftState, ScenePose, \
    drift_step_sigma_for_rms, perturb_localization


def default_pair_offset() -> RigidTransform:
    """Relative pose between the benchmark marker-set pair.

    108 mm of vertical separation keeps even the large five-marker cards
    clear of each other at every bin, and a 5 degree relative tilt makes
    the rotational part of the offset observable rather than identity.
    """
    return RigidTransform(
        rotation=axis_angle_rotation(np.array([1.0, 0.0, 0.0]),
                                     math.radians(5.0)),
        translation=np.array([0.0, 108.0, 0.0]))


def _default_set_a() -> MarkerSet:
    return standard_set("A", 5, first_id=0)


def _default_set_b() -> MarkerSet:
    return standard_set("B", 5, first_id=5)


@dataclass(frozen=True)
class OffsetExperimentConfig:
    """Known-offset benchmark: track two rigidly joined marker sets and
    compare their measured relative pose against the exact truth.

    Measurement noise is injected as an isotropic Gaussian of
    keypoint_noise_px pixels on every extracted keypoint, independently per
    eye; everything downstream of detection (matching, triangulation, the
    gap and outlier screens, candidate fitting) runs on the noisy
    measurements. The draw for a given keypoint depends only on (seed,
    frame, eye, label), so tracking variants see identical noise on the
    keypoints they share. The rendering NoiseModel stays available for
    image-level realism on top.
    """

    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    keypoint_noise_px: float = 0.15
    markerset_a: MarkerSet = field(default_factory=_default_set_a)
    markerset_b: MarkerSet = field(default_factory=_default_set_b)
    true_offset: RigidTransform = field(default_factory=default_pair_offset)
    tracking: TrackingParams = field(default_factory=TrackingParams)
    render_seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.markerset_a.set_id == self.markerset_b.set_id:
            raise ValueError("marker sets need distinct set ids")
        shared = (set(self.markerset_a.aruco_ids)
                  & set(self.markerset_b.aruco_ids))
        if shared:
            raise ValueError(f"marker sets share aruco ids {sorted(shared)}")


@dataclass(frozen=True)
class FrameResidual:
    """Per-frame benchmark outcome: pose error of the measured set-to-set
    offset, or a tracking-lost marker with NaN errors."""

    frame_index: int
    distance_bin_cm: tuple
    angle_bin_deg: tuple
    distance_mm: float
    angle_deg: float
    tracked: bool
    translation_err_mm: float
    rotation_err_deg: float
    points_a: int
    points_b: int
    fre_a: float
    fre_b: float


@dataclass(frozen=True)
class RmsCell:
    """One (distance, angle) bin of the benchmark table."""

    translation_rms_mm: float
    rotation_rms_deg: float
    frames_used: int
    tracking_lost: int


@dataclass(frozen=True)
class RmsTable:
    """Distance-binned rows x angle-binned columns of RMS pose error."""

    distance_bins_cm: tuple
    angle_bins_deg: tuple
    cells: dict  # keyed by float bin tuples, see _bin_key

    def cell(self, distance_bin_cm, angle_bin_deg) -> RmsCell:
        return self.cells[(_bin_key(distance_bin_cm),
                           _bin_key(angle_bin_deg))]

    @staticmethod
    def from_residuals(residuals, distance_bins_cm,
                       angle_bins_deg) -> "RmsTable":
        """Aggregate per-frame residuals into the binned RMS table.

        Lost frames count toward the cell's loss tally and contribute
        nothing to its RMS.
        """
        distance_bins_cm = tuple(_bin_key(b) for b in distance_bins_cm)
        angle_bins_deg = tuple(_bin_key(b) for b in angle_bins_deg)
        groups = {(d, a): [] for d in distance_bins_cm
                  for a in angle_bins_deg}
        for r in residuals:
            groups[(_bin_key(r.distance_bin_cm),
                    _bin_key(r.angle_bin_deg))].append(r)
        cells = {}
        for key, rows in groups.items():
            used = [r for r in rows if r.tracked]
            cells[key] = RmsCell(
                translation_rms_mm=_rms([r.translation_err_mm for r in used]),
                rotation_rms_deg=_rms([r.rotation_err_deg for r in used]),
                frames_used=len(used),
                tracking_lost=len(rows) - len(used))
        return RmsTable(distance_bins_cm, angle_bins_deg, cells)


def _bin_key(bin_edges) -> tuple:
    """Bins compare as floats so tables survive a CSV round trip."""
    lo, hi = bin_edges
    return (float(lo), float(hi))


def _rms(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(np.square(values))))


# --- keypoint measurement noise ----------------------------------------------

_KEYPOINT_NOISE_STREAM = 77  # seed-word separating this draw from rendering


def _keypoint_noise_tables(markersets, eyes, sigma_px: float,
                           rng: np.random.Generator) -> dict:
    """Per-label pixel offsets for every (set, eye), drawn canonically.

    Offsets are drawn in each set's full reference-label order whether or
    not a label was detected, so a label's noise never depends on what else
    the detector found or on which tracking variant is running.
    """
    tables = {}
    for ms in markersets:
        labels = list(ms.reference_points())
        for eye in eyes:
            offsets = rng.normal(0.0, sigma_px, size=(len(labels), 2))
            tables[ms.set_id, eye] = dict(zip(labels, offsets))
    return tables


def _with_keypoint_noise(keypoints, table):
    if table is None:
        return keypoints
    return [replace(kp, position=kp.position + table[kp.label])
            for kp in keypoints]


# --- frame runner -----------------------------------------------------------
#
# One task renders one scene and tracks it under every requested tracking
# variant. Detection is shared across variants (it does not depend on the
# tracking parameters), so a chessboard on/off pair costs one sweep.

_WORKER: dict = {}


def _init_frame_worker(cfg: OffsetExperimentConfig, variants: dict) -> None:
    _WORKER["cfg"] = cfg
    _WORKER["variants"] = variants
    _WORKER["rig"] = default_rig()
    cv2.setNumThreads(1)


def _variant_residual(scene: ScenePose, rig, left, right, detections, noise,
                      cfg: OffsetExperimentConfig,
                      params: TrackingParams) -> FrameResidual:
    estimates = []
    for ms in (cfg.markerset_a, cfg.markerset_b):
        key = id(ms.dictionary)
        left_kps = _with_keypoint_noise(
            extract_keypoints(left, ms, cam=rig.left,
                              chessboard=params.use_chessboard,
                              detections=detections["L", key]),
            noise.get((ms.set_id, "L")))
        right_kps = _with_keypoint_noise(
            extract_keypoints(right, ms, cam=rig.right,
                              chessboard=params.use_chessboard,
                              detections=detections["R", key]),
            noise.get((ms.set_id, "R")))
        try:
            estimate, _ = pose_from_keypoints(left_kps, right_kps, rig, ms,
                                              params)
        except (TrackingLost, DegenerateGeometry):
            estimate = None
        estimates.append(estimate)
    est_a, est_b = estimates

    base = dict(frame_index=scene.frame_index,
                distance_bin_cm=tuple(scene.distance_bin_cm),
                angle_bin_deg=tuple(scene.angle_bin_deg),
                distance_mm=scene.distance_mm, angle_deg=scene.angle_deg,
                points_a=est_a.points_used if est_a else 0,
                points_b=est_b.points_used if est_b else 0,
                fre_a=est_a.fre if est_a else float("nan"),
                fre_b=est_b.fre if est_b else float("nan"))
    if est_a is None or est_b is None:
        return FrameResidual(tracked=False, translation_err_mm=float("nan"),
                             rotation_err_deg=float("nan"), **base)
    relative = compose(invert(est_a.transform), est_b.transform)
    return FrameResidual(
        tracked=True,
        translation_err_mm=float(np.linalg.norm(
            relative.translation - cfg.true_offset.translation)),
        rotation_err_deg=rotation_distance_deg(relative.rotation,
                                               cfg.true_offset.rotation),
        **base)


def _run_frame(scene: ScenePose):
    cfg: OffsetExperimentConfig = _WORKER["cfg"]
    rig = _WORKER["rig"]
    left, right, _ = render_stereo(
        [(cfg.markerset_a, scene.pose_a), (cfg.markerset_b, scene.pose_b)],
        rig, cfg.noise, seed=[cfg.render_seed, scene.frame_index])
    detections = {}
    for eye, image in (("L", left), ("R", right)):
        for ms in (cfg.markerset_a, cfg.markerset_b):
            key = id(ms.dictionary)
            if (eye, key) not in detections:
                detections[eye, key] = detect_markers(image, ms.dictionary)
    noise = {}
    if cfg.keypoint_noise_px > 0:
        noise = _keypoint_noise_tables(
            (cfg.markerset_a, cfg.markerset_b), ("L", "R"),
            cfg.keypoint_noise_px,
            np.random.default_rng([cfg.render_seed, _KEYPOINT_NOISE_STREAM,
                                   scene.frame_index]))
    return scene.frame_index, {
        name: _variant_residual(scene, rig, left, right, detections, noise,
                                cfg, params)
        for name, params in _WORKER["variants"].items()}


def _run_frames(cfg: OffsetExperimentConfig, variants: dict,
                jobs: int = 1) -> dict:
    """Render and track every trajectory frame under each variant.

    Returns {variant name: [FrameResidual, ...]} in frame order regardless
    of worker scheduling.
    """
    scenes = simulate_trajectory(cfg.trajectory, cfg.true_offset)
    if jobs <= 1:
        _init_frame_worker(cfg, variants)
        rows = [_run_frame(scene) for scene in scenes]
    else:
        chunk = max(1, len(scenes) // (4 * jobs))
        with ProcessPoolExecutor(max_workers=jobs,
                                 initializer=_init_frame_worker,
                                 initargs=(cfg, variants)) as pool:
            rows = list(pool.map(_run_frame, scenes, chunksize=chunk))
    rows.sort(key=lambda row: row[0])
    out = {name: [] for name in variants}
    for _, per_variant in rows:
        for name, residual in per_variant.items():
            out[name].append(residual)
    return out


def run_offset_experiment(cfg: OffsetExperimentConfig, jobs: int = 1,
                          out_dir=None):
    """Run the known-offset benchmark; returns (RmsTable, residual list).

    The per-frame residual log and the aggregate table are persisted under
    `out_dir` (falling back to cfg.output_dir, then ./fidus-out/offset-bench)
    together with a figure of RMS error against distance per angle column,
    so the table can always be recomputed from what is on disk.
    """
    residuals = _run_frames(cfg, {"default": cfg.tracking}, jobs)["default"]
    table = RmsTable.from_residuals(residuals,
                                    cfg.trajectory.distance_bins_cm,
                                    cfg.trajectory.angle_bins_deg)
    out_dir = Path(out_dir or cfg.output_dir or "fidus-out/offset-bench")
    from fidus.harness import reports
    reports.write_offset_report(out_dir, cfg, table, residuals)
    return table, residuals


# --- ablation ---------------------------------------------------------------

def _ablation_trajectory() -> TrajectoryConfig:
    """Full distance/angle grid at 84 frames per bin: 1008 frames per arm."""
    return TrajectoryConfig(frames_per_bin=84)


@dataclass(frozen=True)
class AblationConfig:
    """Marker-count x chessboard ablation of the known-offset benchmark.

    Every frame of a marker-count arm is rendered once and tracked twice,
    with and without chessboard keypoints, so the comparison is paired:
    both variants see identical images and identical injected noise on the
    keypoints they share.
    """

    trajectory: TrajectoryConfig = field(default_factory=_ablation_trajectory)
    noise: NoiseModel = field(default_factory=NoiseModel)
    keypoint_noise_px: float = 0.15
    marker_counts: tuple = (2, 5)
    true_offset: RigidTransform = field(default_factory=default_pair_offset)
    tracking: TrackingParams = field(default_factory=TrackingParams)
    render_seed: int = 0
    output_dir: str | None = None


@dataclass(frozen=True)
class AblationRow:
    """Whole-protocol RMS for one (marker count, chessboard) arm."""

    marker_count: int
    chessboard: bool
    translation_rms_mm: float
    rotation_rms_deg: float
    frames_used: int
    tracking_lost: int


def run_ablation(cfg: AblationConfig, jobs: int = 1, out_dir=None):
    """Run the ablation; returns (rows, {arm name: residual list}).

    Arm names are '<n>-marker/chessboard' and '<n>-marker/corners-only'.
    RMS is aggregated over the whole trajectory rather than per bin; the
    per-frame logs keep the bins for finer slicing.
    """
    rows = []
    logs = {}
    for count in cfg.marker_counts:
        arm_cfg = OffsetExperimentConfig(
            trajectory=cfg.trajectory, noise=cfg.noise,
            keypoint_noise_px=cfg.keypoint_noise_px,
            markerset_a=standard_set(f"A{count}", count, first_id=0),
            markerset_b=standard_set(f"B{count}", count, first_id=count),
            true_offset=cfg.true_offset, tracking=cfg.tracking,
            render_seed=cfg.render_seed)
        variants = {
            f"{count}-marker/chessboard":
                replace(cfg.tracking, use_chessboard=True),
            f"{count}-marker/corners-only":
                replace(cfg.tracking, use_chessboard=False),
        }
        for name, residuals in _run_frames(arm_cfg, variants, jobs).items():
            used = [r for r in residuals if r.tracked]
            rows.append(AblationRow(
                marker_count=count,
                chessboard=name.endswith("chessboard"),
                translation_rms_mm=_rms([r.translation_err_mm for r in used]),
                rotation_rms_deg=_rms([r.rotation_err_deg for r in used]),
                frames_used=len(used),
                tracking_lost=len(residuals) - len(used)))
            logs[name] = residuals
    out_dir = Path(out_dir or cfg.output_dir or "fidus-out/ablation")
    from fidus.harness import reports
    reports.write_ablation_report(out_dir, cfg, rows, logs)
    return rows, logs


# --- reconstruction comparison ----------------------------------------------

@dataclass(frozen=True)
class ReconExperimentConfig:
    """Freehand sweep reconstruction, world chain versus anchor chain.

    A probe marker set sweeps across a virtual sphere phantom while a static
    anchor set shares the field of view. Slices are synthesized from exact
    geometry; poses come from the real tracking pipeline with
    keypoint_noise_px of injected measurement noise (0.15 px at the default
    300 mm stand-off makes each triangulated point err by roughly half a
    millimeter). The world chain additionally passes through a
    self-localization pose corrupted by a bounded random walk whose
    stationary RMS is drift_rms_mm.
    """

    n_frames: int = 150
    distance_mm: float = 300.0
    lateral_mm: float = 70.0
    sweep_mm: float = 24.0
    sphere_radius_mm: float = 7.5
    sphere_intensity: int = 200
    voxel_size_mm: float = 0.5
    frame_width: int = 64
    frame_height: int = 64
    pixel_spacing: tuple = (0.4, 0.4)
    drift_rms_mm: float = 10.0
    noise: NoiseModel = field(default_factory=NoiseModel)
    keypoint_noise_px: float = 0.15
    marker_count: int = 5
    tracking: TrackingParams = field(default_factory=TrackingParams)
    render_seed: int = 0
    drift_seed: int = 101
    output_dir: str | None = None


@dataclass(frozen=True)
class ReconComparison:
    """Sphere fidelity of the two chains plus the realized error budget.

    probe_rms_mm / anchor_rms_mm are pose-translation RMS against exact
    geometry; probe_fre_mm (mean fiducial registration error) tracks the
    per-point stereo measurement noise; drift_rms_mm is the realized RMS of
    the injected localization walk.
    """

    world: SphereReport
    anchor: SphereReport
    chain_disagreement_mm: float
    frames_used: int
    anchor_lost: int
    probe_lost: int
    probe_rms_mm: float
    anchor_rms_mm: float
    probe_fre_mm: float
    drift_rms_mm: float
    voxel_size_mm: float


def _recon_calibration(cfg: ReconExperimentConfig) -> TipCalibration:
    """Probe calibration for the sweep: tip 60 mm out from the marker card,
    image plane centered on the tip and perpendicular to the sweep axis."""
    half_w = 0.5 * cfg.frame_width * cfg.pixel_spacing[0]
    half_h = 0.5 * cfg.frame_height * cfg.pixel_spacing[1]
    t_marker_tip = RigidTransform(
        rotation=axis_angle_rotation(np.array([0.0, 0.0, 1.0]),
                                     math.radians(10.0)),
        translation=np.array([0.0, 30.0, 60.0]))
    t_tip_image = RigidTransform(
        rotation=np.eye(3), translation=np.array([-half_w, -half_h, 0.0]))
    return TipCalibration(t_marker_tip=t_marker_tip,
                          pixel_spacing=tuple(cfg.pixel_spacing),
                          t_tip_image=t_tip_image)


def run_recon_experiment(cfg: ReconExperimentConfig, out_dir=None):
    """Run the sweep and reconstruct it twice; returns a ReconComparison.

    Frames where either marker set loses tracking are excluded from both
    volumes (and counted), keeping the two chains on identical data. Each
    chain's volume is scored against the truth phantom expressed in that
    chain's own reference frame; chain_disagreement_mm maps both measured
    sphere centroids into a common frame through the exact anchor pose.
    """
    rig = default_rig()
    calib = _recon_calibration(cfg)
    anchor_ms = standard_set("ANCHOR", cfg.marker_count, first_id=0)
    probe_ms = standard_set("PROBE", cfg.marker_count,
                            first_id=cfg.marker_count)

    anchor_pose = facing_pose(cfg.distance_mm, (-cfg.lateral_mm, 0.0))
    mid_pose = facing_pose(cfg.distance_mm, (cfg.lateral_mm, 0.0))
    sphere_center = compose(mid_pose, calib.t_marker_tip).translation
    phantom_world = PhantomSpec(spheres=(SphereSpec(
        center=tuple(sphere_center), radius=cfg.sphere_radius_mm,
        intensity=cfg.sphere_intensity),))
    center_anchor = invert(anchor_pose).apply(sphere_center)
    phantom_anchor = PhantomSpec(spheres=(SphereSpec(
        center=tuple(center_anchor), radius=cfg.sphere_radius_mm,
        intensity=cfg.sphere_intensity),))

    drift_noise = NoiseModel(
        localization_sigma_t=drift_step_sigma_for_rms(cfg.drift_rms_mm))
    drift_rng = np.random.default_rng([cfg.drift_seed])
    drift_state = DriftState.initial()
    identity_world_cam = RigidTransform.identity()

    world_slices, anchor_slices = [], []
    probe_errors, anchor_errors, drift_magnitudes = [], [], []
    probe_fres = []
    anchor_lost = probe_lost = 0
    denom = max(cfg.n_frames - 1, 1)
    for i in range(cfg.n_frames):
        reported_world_cam, drift_state = perturb_localization(
            identity_world_cam, drift_noise, drift_state, drift_rng)
        drift_magnitudes.append(
            float(np.linalg.norm(reported_world_cam.translation)))

        probe_pose = facing_pose(
            cfg.distance_mm + (i / denom - 0.5) * cfg.sweep_mm,
            (cfg.lateral_mm, 0.0))
        left, right, _ = render_stereo(
            [(anchor_ms, anchor_pose), (probe_ms, probe_pose)], rig,
            cfg.noise, seed=[cfg.render_seed, i])
        noise_tables = {}
        if cfg.keypoint_noise_px > 0:
            noise_tables = _keypoint_noise_tables(
                (anchor_ms, probe_ms), ("L", "R"), cfg.keypoint_noise_px,
                np.random.default_rng([cfg.render_seed,
                                       _KEYPOINT_NOISE_STREAM, i]))
        estimates = _track_pair(left, right, rig, (anchor_ms, probe_ms),
                                cfg.tracking, noise_tables)
        if estimates[0] is None:
            anchor_lost += 1
        if estimates[1] is None:
            probe_lost += 1
        if estimates[0] is None or estimates[1] is None:
            continue
        est_anchor, est_probe = estimates
        anchor_errors.append(float(np.linalg.norm(
            est_anchor.transform.translation - anchor_pose.translation)))
        probe_errors.append(float(np.linalg.norm(
            est_probe.transform.translation - probe_pose.translation)))
        probe_fres.append(est_probe.fre)

        true_image_pose = compose(compose(probe_pose, calib.t_marker_tip),
                                  calib.t_tip_image)
        frame = synth_us_slice(phantom_world, true_image_pose,
                               cfg.frame_width, cfg.frame_height,
                               cfg.pixel_spacing, timestamp=float(i))

        t_cam_probe = FramedTransform(est_probe.transform, FrameTag.CAMERA,
                                      FrameTag.PROBE)
        t_cam_anchor = FramedTransform(est_anchor.transform, FrameTag.CAMERA,
                                       FrameTag.ANCHOR)
        t_world_cam = FramedTransform(reported_world_cam, FrameTag.WORLD,
                                      FrameTag.CAMERA)
        world_slices.append(TrackedSlice(
            frame=frame,
            pose=slice_pose_world(t_world_cam, t_cam_probe, calib).transform,
            reference=FrameTag.WORLD))
        anchor_slices.append(TrackedSlice(
            frame=frame,
            pose=slice_pose_anchor(t_cam_anchor, t_cam_probe,
                                   calib).transform,
            reference=FrameTag.ANCHOR))

    world_volume = compound(world_slices, calib, cfg.voxel_size_mm)
    anchor_volume = compound(anchor_slices, calib, cfg.voxel_size_mm)
    world_report = volume_metrics(world_volume, phantom_world)[0]
    anchor_report = volume_metrics(anchor_volume, phantom_anchor)[0]
    disagreement = float(np.linalg.norm(
        world_report.measured_centroid
        - anchor_pose.apply(anchor_report.measured_centroid)))

    comparison = ReconComparison(
        world=world_report, anchor=anchor_report,
        chain_disagreement_mm=disagreement,
        frames_used=len(world_slices), anchor_lost=anchor_lost,
        probe_lost=probe_lost, probe_rms_mm=_rms(probe_errors),
        anchor_rms_mm=_rms(anchor_errors), drift_rms_mm=_rms(drift_magnitudes),
        voxel_size_mm=cfg.voxel_size_mm)
    out_dir = Path(out_dir or cfg.output_dir or "fidus-out/recon-bench")
    from fidus.harness import reports
    reports.write_recon_report(out_dir, cfg, comparison)
    return comparison


def _track_pair(left, right, rig, markersets, params):
    """Track two marker sets with a shared detection sweep; None where lost."""
    caches = ({}, {})
    estimates = []
    for ms in markersets:
        key = id(ms.dictionary)
        for cache, image in zip(caches, (left, right)):
            if key not in cache:
                cache[key] = detect_markers(image, ms.dictionary)
        left_kps = extract_keypoints(left, ms, cam=rig.left,
                                     chessboard=params.use_chessboard,
                                     detections=caches[0][key])
        right_kps = extract_keypoints(right, ms, cam=rig.right,
                                      chessboard=params.use_chessboard,
                                      detections=caches[1][key])
        try:
            estimate, _ = pose_from_keypoints(left_kps, right_kps, rig, ms,
                                              params)
        except (TrackingLost, DegenerateGeometry):
            estimate = None
        estimates.append(estimate)
    return estimates


# --- timing -----------------------------------------------------------------

@dataclass(frozen=True)
class TimingConfig:
    """Wall-clock measurement of the per-frame tracking stages.

    A small corpus of distinct rendered frames is cycled until n_frames
    measurements are collected, so timing dominates rendering cost.
    """

    n_frames: int = 500
    n_distinct_scenes: int = 60
    marker_count: int = 5
    distance_range_mm: tuple = (150.0, 550.0)
    max_tilt_deg: float = 30.0
    noise: NoiseModel = field(default_factory=lambda: NoiseModel(
        pixel_sigma=0.02, blur_radius=0.6, intensity_gain_range=(0.9, 1.0)))
    tracking: TrackingParams = field(default_factory=TrackingParams)
    render_seed: int = 0
    output_dir: str | None = None


@dataclass(frozen=True)
class StageStats:
    """Milliseconds per stereo frame for one pipeline stage."""

    mean_ms: float
    p50_ms: float
    p90_ms: float
    p99_ms: float

    @staticmethod
    def from_seconds(samples) -> "StageStats":
        ms = 1e3 * np.asarray(samples, dtype=float)
        return StageStats(mean_ms=float(ms.mean()),
                          p50_ms=float(np.percentile(ms, 50)),
                          p90_ms=float(np.percentile(ms, 90)),
                          p99_ms=float(np.percentile(ms, 99)))


@dataclass(frozen=True)
class TimingReport:
    """Stage timings over the measured frames (single OpenCV thread)."""

    extraction: StageStats
    pose: StageStats
    n_frames: int
    tracking_lost: int


def run_timing(cfg: TimingConfig, out_dir=None) -> TimingReport:
    """Measure keypoint-extraction and pose-stage time per stereo frame.

    Extraction covers marker detection, corner refinement and chessboard
    nodes for both eyes; the pose stage covers matching, triangulation, the
    outlier screen and candidate fitting. OpenCV is pinned to one thread
    for the measurement and restored afterwards. One untimed warmup lap
    over the corpus populates lazy caches before measuring.
    """
    rig = default_rig()
    ms = standard_set("T", cfg.marker_count, first_id=0)
    rng = np.random.default_rng([cfg.render_seed, 9])
    corpus = []
    for k in range(cfg.n_distinct_scenes):
        pose = facing_pose(
            float(rng.uniform(*cfg.distance_range_mm)),
            tuple(rng.uniform(-10.0, 10.0, size=2)),
            tilt_deg=float(rng.uniform(0.0, cfg.max_tilt_deg)),
            tilt_azimuth_deg=float(rng.uniform(0.0, 360.0)),
            roll_deg=float(rng.uniform(0.0, 360.0)))
        left, right, _ = render_stereo([(ms, pose)], rig, cfg.noise,
                                       seed=[cfg.render_seed, k])
        corpus.append((left, right))

    extraction_s, pose_s = [], []
    lost = 0
    old_threads = cv2.getNumThreads()
    cv2.setNumThreads(1)
    try:
        for left, right in corpus:
            extract_keypoints(left, ms, cam=rig.left,
                              chessboard=cfg.tracking.use_chessboard)
        for i in range(cfg.n_frames):
            left, right = corpus[i % len(corpus)]
            t0 = time.perf_counter()
            left_kps = extract_keypoints(
                left, ms, cam=rig.left, chessboard=cfg.tracking.use_chessboard)
            right_kps = extract_keypoints(
                right, ms, cam=rig.right,
                chessboard=cfg.tracking.use_chessboard)
            t1 = time.perf_counter()
            try:
                pose_from_keypoints(left_kps, right_kps, rig, ms,
                                    cfg.tracking)
            except TrackingLost:
                lost += 1
            t2 = time.perf_counter()
            extraction_s.append(t1 - t0)
            pose_s.append(t2 - t1)
    finally:
        cv2.setNumThreads(old_threads)

    report = TimingReport(extraction=StageStats.from_seconds(extraction_s),
                          pose=StageStats.from_seconds(pose_s),
                          n_frames=cfg.n_frames, tracking_lost=lost)
    out_dir = Path(out_dir or cfg.output_dir or "fidus-out/timing")
    from fidus.harness import reports
    reports.write_timing_report(out_dir, cfg, report)
    return report
