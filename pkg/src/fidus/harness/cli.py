"""Command-line front end for the tracking library and its benchmarks.

Every benchmark subcommand takes an optional JSON --config whose keys mirror
the corresponding config dataclass, an optional --seed override, and an
--out directory that receives delimited logs plus rendered figures.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np

from fidus.chains import identity_calibration, load_tip_calibration
from fidus.errors import FidusError, TrackingLost
from fidus.geometry import RigidTransform, axis_angle_rotation
from fidus.harness import experiments, reports
from fidus.markers import load_marker_set, standard_set
from fidus.recon import compound, pair_streams, read_frame_stream, \
    read_pose_stream, write_volume
from fidus.stereo import TrackingParams, track_frame
from fidus.synthcam import NoiseModel, TrajectoryConfig, default_rig, \
    load_rig, render_stereo, simulate_trajectory


# --- config assembly ---------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as handle:
        return json.load(handle)


def _noise_from(doc: dict) -> NoiseModel:
    doc = dict(doc)
    if "intensity_gain_range" in doc:
        doc["intensity_gain_range"] = tuple(doc["intensity_gain_range"])
    return NoiseModel(**doc)


def _trajectory_from(doc: dict) -> TrajectoryConfig:
    doc = dict(doc)
    for key in ("distance_bins_cm", "angle_bins_deg"):
        if key in doc:
            doc[key] = tuple(tuple(b) for b in doc[key])
    return TrajectoryConfig(**doc)


def _tracking_from(doc: dict) -> TrackingParams:
    return TrackingParams(**doc)


def _transform_from(doc: dict) -> RigidTransform:
    """Rigid transform from JSON: either a 4x4 'matrix' row-major list, or
    'translation' plus optional 'rotation_axis'/'rotation_deg'."""
    if "matrix" in doc:
        return RigidTransform.from_matrix(np.asarray(doc["matrix"], float))
    rotation = np.eye(3)
    if doc.get("rotation_deg"):
        axis = np.asarray(doc.get("rotation_axis", (1.0, 0.0, 0.0)), float)
        rotation = axis_angle_rotation(axis,
                                       math.radians(doc["rotation_deg"]))
    return RigidTransform(rotation=rotation,
                          translation=np.asarray(
                              doc.get("translation", (0.0, 0.0, 0.0)), float))


def _markerset_from(value):
    """Marker set from a JSON value: a file path string, or an inline spec
    {'set_id', 'n_markers', 'first_id', 'cell_mm'}."""
    if isinstance(value, str):
        return load_marker_set(value)
    doc = dict(value)
    return standard_set(doc["set_id"], doc["n_markers"],
                        first_id=doc.get("first_id", 0),
                        cell_mm=doc.get("cell_mm", 4.0))


_NESTED_BUILDERS = {
    "trajectory": _trajectory_from,
    "noise": _noise_from,
    "tracking": _tracking_from,
    "true_offset": _transform_from,
    "markerset_a": _markerset_from,
    "markerset_b": _markerset_from,
    "pixel_spacing": tuple,
    "marker_counts": tuple,
    "distance_range_mm": tuple,
}


def _build_config(cls, doc: dict, seed):
    kwargs = {key: _NESTED_BUILDERS[key](value)
              if key in _NESTED_BUILDERS else value
              for key, value in doc.items()}
    cfg = cls(**kwargs)
    if seed is None:
        return cfg
    updates = {"render_seed": seed}
    if hasattr(cfg, "trajectory"):
        updates["trajectory"] = replace(cfg.trajectory, seed=seed)
    return replace(cfg, **updates)


def _parse_standard_spec(spec: str):
    """'standard:<set_id>:<n>[:<first_id>]' -> MarkerSet, else a file path."""
    if not spec.startswith("standard:"):
        return load_marker_set(spec)
    parts = spec.split(":")
    if len(parts) not in (3, 4):
        raise ValueError(
            "expected standard:<set_id>:<n_markers>[:<first_id>]")
    first = int(parts[3]) if len(parts) == 4 else 0
    return standard_set(parts[1], int(parts[2]), first_id=first)


# --- subcommands --------------------------------------------------------------

def _cmd_track(args) -> int:
    rig = load_rig(args.rig) if args.rig else default_rig()
    markerset = _parse_standard_spec(args.set)
    left = cv2.imread(str(args.left), cv2.IMREAD_GRAYSCALE)
    right = cv2.imread(str(args.right), cv2.IMREAD_GRAYSCALE)
    if left is None or right is None:
        print("error: cannot read input images", file=sys.stderr)
        return 2
    params = TrackingParams(use_chessboard=not args.no_chessboard)
    try:
        estimate = track_frame(left, right, rig, markerset, params)
    except TrackingLost as exc:
        print(f"tracking lost: {exc}", file=sys.stderr)
        return 3
    matrix = estimate.transform.matrix()
    for row in matrix:
        print("  ".join(f"{v: .6f}" for v in row))
    print(f"fre_mm: {estimate.fre:.6f}")
    print(f"points_used: {estimate.points_used}")
    if args.out:
        payload = {"matrix": matrix.tolist(), "fre_mm": estimate.fre,
                   "points_used": estimate.points_used,
                   "set_id": markerset.set_id}
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as handle:
            json.dump(payload, handle, indent=2)
            handle.write("\n")
    return 0


def _cmd_render(args) -> int:
    cfg = _build_config(experiments.OffsetExperimentConfig,
                        _load_config(args.config), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rig = default_rig()
    scenes = simulate_trajectory(cfg.trajectory, cfg.true_offset)
    if args.limit is not None:
        scenes = scenes[:args.limit]
    truth_rows = []
    scene_rows = []
    for scene in scenes:
        left, right, truth = render_stereo(
            [(cfg.markerset_a, scene.pose_a),
             (cfg.markerset_b, scene.pose_b)],
            rig, cfg.noise, seed=[cfg.render_seed, scene.frame_index])
        cv2.imwrite(str(out / f"left_{scene.frame_index:05d}.png"), left)
        cv2.imwrite(str(out / f"right_{scene.frame_index:05d}.png"), right)
        for e in truth.entries:
            label = f"{e.label.marker_id}:{e.label.kind}:{e.label.index}"
            truth_rows.append((
                scene.frame_index, e.set_id, label,
                repr(float(e.position_rig[0])), repr(float(e.position_rig[1])),
                repr(float(e.position_rig[2])),
                repr(float(e.left_px[0])), repr(float(e.left_px[1])),
                repr(float(e.right_px[0])), repr(float(e.right_px[1])),
                int(e.left_in_frame), int(e.right_in_frame)))
        for set_id, pose in (("a", scene.pose_a), ("b", scene.pose_b)):
            quat = pose.quat()
            scene_rows.append((
                scene.frame_index, set_id, repr(scene.distance_mm),
                repr(scene.angle_deg),
                *(repr(float(v)) for v in quat),
                *(repr(float(v)) for v in pose.translation)))
    reports.write_csv(out / "truth.csv",
                       [f"render_seed: {cfg.render_seed}"],
                       ("frame", "set_id", "label", "x_mm", "y_mm", "z_mm",
                        "left_x_px", "left_y_px", "right_x_px", "right_y_px",
                        "left_in_frame", "right_in_frame"), truth_rows)
    reports.write_csv(out / "scenes.csv",
                       [f"trajectory_seed: {cfg.trajectory.seed}"],
                       ("frame", "set", "distance_mm", "angle_deg",
                        "qw", "qx", "qy", "qz", "tx_mm", "ty_mm", "tz_mm"),
                       scene_rows)
    print(f"rendered {len(scenes)} stereo frames to {out}")
    return 0


def _cmd_offset_bench(args) -> int:
    cfg = _build_config(experiments.OffsetExperimentConfig,
                        _load_config(args.config), args.seed)
    table, residuals = experiments.run_offset_experiment(
        cfg, jobs=args.jobs, out_dir=args.out)
    lost = sum(1 for r in residuals if not r.tracked)
    print(reports.format_rms_table(table))
    print(f"frames: {len(residuals)}  tracking lost: {lost}")
    print(f"reports written to {Path(args.out)}")
    return 0


def _cmd_ablation(args) -> int:
    cfg = _build_config(experiments.AblationConfig,
                        _load_config(args.config), args.seed)
    rows, _ = experiments.run_ablation(cfg, jobs=args.jobs, out_dir=args.out)
    for row in rows:
        kind = "chessboard  " if row.chessboard else "corners-only"
        print(f"{row.marker_count} markers  {kind}  "
              f"t_rms={row.translation_rms_mm:.4f}mm  "
              f"r_rms={row.rotation_rms_deg:.4f}deg  "
              f"used={row.frames_used}  lost={row.tracking_lost}")
    print(f"reports written to {Path(args.out)}")
    return 0


def _cmd_recon_bench(args) -> int:
    cfg = _build_config(experiments.ReconExperimentConfig,
                        _load_config(args.config), args.seed)
    comparison = experiments.run_recon_experiment(cfg, out_dir=args.out)
    for name, report in (("world ", comparison.world),
                         ("anchor", comparison.anchor)):
        print(f"{name} chain: centroid_err={report.centroid_error_mm:.3f}mm  "
              f"radius_err={report.radius_error_mm:.3f}mm  "
              f"fill={report.fill_fraction:.3f}")
    print(f"chain disagreement: {comparison.chain_disagreement_mm:.3f}mm")
    print(f"frames used: {comparison.frames_used}  "
          f"anchor lost: {comparison.anchor_lost}  "
          f"probe lost: {comparison.probe_lost}")
    print(f"measured drift RMS: {comparison.drift_rms_mm:.2f}mm  "
          f"probe pose RMS: {comparison.probe_rms_mm:.3f}mm")
    print(f"reports written to {Path(args.out)}")
    return 0


def _cmd_timing(args) -> int:
    cfg = _build_config(experiments.TimingConfig,
                        _load_config(args.config), args.seed)
    report = experiments.run_timing(cfg, out_dir=args.out)
    for name, stats in (("extraction", report.extraction),
                        ("pose      ", report.pose)):
        print(f"{name}  mean={stats.mean_ms:.2f}ms  p50={stats.p50_ms:.2f}  "
              f"p90={stats.p90_ms:.2f}  p99={stats.p99_ms:.2f}")
    print(f"frames: {report.n_frames}  tracking lost: {report.tracking_lost}")
    print(f"reports written to {Path(args.out)}")
    return 0


def _cmd_compound(args) -> int:
    frames = read_frame_stream(args.frames)
    poses = read_pose_stream(args.poses)
    calib = (load_tip_calibration(args.calib) if args.calib
             else identity_calibration(
                 frames[0].pixel_spacing if frames else (1.0, 1.0)))
    slices = pair_streams(frames, poses, max_skew=args.max_skew)
    volume = compound(slices, calib, args.voxel)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_volume(volume, args.out)
    defined = int(np.count_nonzero(volume.count))
    print(f"compounded {len(slices)} slices into {volume.dims} voxels "
          f"({defined} defined) at {args.voxel}mm")
    print(f"volume written to {args.out}")
    return 0


# --- parser --------------------------------------------------------------------

def _add_bench_args(parser, default_out, jobs=True):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the render and trajectory seeds")
    parser.add_argument("--out", default=default_out,
                        help="output directory for logs and figures")
    if jobs:
        parser.add_argument("--jobs", type=int, default=1,
                            help="worker processes (results are identical "
                                 "for any value)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fidus",
        description="Stereo fiducial tracking: single-frame tracking, "
                    "synthetic benchmarks, and freehand reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="track one stereo frame")
    p.add_argument("--left", required=True, help="left eye image")
    p.add_argument("--right", required=True, help="right eye image")
    p.add_argument("--rig", help="stereo rig JSON (default: built-in rig)")
    p.add_argument("--set", required=True,
                   help="marker set file, or standard:<id>:<n>[:<first_id>]")
    p.add_argument("--no-chessboard", action="store_true",
                   help="use marker corners only")
    p.add_argument("--out", help="write the pose as JSON here")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("render", help="render a synthetic benchmark corpus")
    _add_bench_args(p, "fidus-out/render", jobs=False)
    p.add_argument("--limit", type=int, default=None,
                   help="render only the first N frames")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("offset-bench",
                       help="known-offset tracking accuracy benchmark")
    _add_bench_args(p, "fidus-out/offset-bench")
    p.set_defaults(func=_cmd_offset_bench)

    p = sub.add_parser("ablation",
                       help="marker-count x chessboard keypoint ablation")
    _add_bench_args(p, "fidus-out/ablation")
    p.set_defaults(func=_cmd_ablation)

    p = sub.add_parser("recon-bench",
                       help="world-chain vs anchor-chain reconstruction")
    _add_bench_args(p, "fidus-out/recon-bench", jobs=False)
    p.set_defaults(func=_cmd_recon_bench)

    p = sub.add_parser("timing", help="per-stage tracking time benchmark")
    _add_bench_args(p, "fidus-out/timing", jobs=False)
    p.set_defaults(func=_cmd_timing)

    p = sub.add_parser("compound",
                       help="compound a frame+pose stream into a volume")
    p.add_argument("--frames", required=True,
                   help="frame stream directory (manifest.json + raw files)")
    p.add_argument("--poses", required=True, help="pose stream file")
    p.add_argument("--calib", help="tip calibration JSON "
                                   "(default: identity at frame spacing)")
    p.add_argument("--voxel", type=float, default=0.5,
                   help="voxel edge length in mm")
    p.add_argument("--max-skew", type=float, default=0.05,
                   help="max frame/pose timestamp skew in seconds")
    p.add_argument("--out", required=True, help="output volume file")
    p.set_defaults(func=_cmd_compound)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FidusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
