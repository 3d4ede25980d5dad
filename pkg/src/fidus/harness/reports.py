"""Result persistence for the benchmark harness.

Every experiment leaves two kinds of artifact in its output directory:
delimited logs (CSV with '#' comment headers) that round-trip losslessly,
and rendered PNG figures of the same numbers. Aggregate tables are always
recomputable from the persisted per-frame logs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from fidus.harness.experiments import (AblationRow, FrameResidual, RmsCell,
                                       RmsTable)

_TREND_NOTE = ("acceptance on this table is trend-based: translation RMS "
               "must grow with distance within each angle column, with the "
               "near bins inside their absolute bounds")

_RESIDUAL_FIELDS = (
    "frame_index", "distance_lo_cm", "distance_hi_cm", "angle_lo_deg",
    "angle_hi_deg", "distance_mm", "angle_deg", "tracked",
    "translation_err_mm", "rotation_err_deg", "points_a", "points_b",
    "fre_a", "fre_b")


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path, comments, header, rows) -> None:
    """Write a delimited log: '#' comment lines, a header row, then rows."""
    with open(path, "w", newline="") as handle:
        for line in comments:
            handle.write(f"# {line}\n")
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _data_rows(path):
    with open(path, newline="") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    return list(csv.reader(lines))


# --- per-frame residual logs -------------------------------------------------

def write_residuals(path, residuals, comments=()) -> None:
    """Persist per-frame residuals; floats keep full round-trip precision."""
    rows = []
    for r in residuals:
        rows.append((
            r.frame_index, repr(float(r.distance_bin_cm[0])),
            repr(float(r.distance_bin_cm[1])),
            repr(float(r.angle_bin_deg[0])), repr(float(r.angle_bin_deg[1])),
            repr(r.distance_mm), repr(r.angle_deg), int(r.tracked),
            repr(r.translation_err_mm), repr(r.rotation_err_deg),
            r.points_a, r.points_b, repr(r.fre_a), repr(r.fre_b)))
    write_csv(path, comments, _RESIDUAL_FIELDS, rows)


def read_residuals(path) -> list:
    """Inverse of write_residuals."""
    rows = _data_rows(path)
    if rows and rows[0] == list(_RESIDUAL_FIELDS):
        rows = rows[1:]
    out = []
    for row in rows:
        out.append(FrameResidual(
            frame_index=int(row[0]),
            distance_bin_cm=(float(row[1]), float(row[2])),
            angle_bin_deg=(float(row[3]), float(row[4])),
            distance_mm=float(row[5]), angle_deg=float(row[6]),
            tracked=bool(int(row[7])),
            translation_err_mm=float(row[8]), rotation_err_deg=float(row[9]),
            points_a=int(row[10]), points_b=int(row[11]),
            fre_a=float(row[12]), fre_b=float(row[13])))
    return out


# --- binned RMS tables --------------------------------------------------------

def write_rms_table(path, table: RmsTable, comments=()) -> None:
    rows = []
    for d_bin in table.distance_bins_cm:
        for a_bin in table.angle_bins_deg:
            cell = table.cell(d_bin, a_bin)
            rows.append((repr(float(d_bin[0])), repr(float(d_bin[1])),
                         repr(float(a_bin[0])), repr(float(a_bin[1])),
                         repr(cell.translation_rms_mm),
                         repr(cell.rotation_rms_deg),
                         cell.frames_used, cell.tracking_lost))
    header = ("distance_lo_cm", "distance_hi_cm", "angle_lo_deg",
              "angle_hi_deg", "translation_rms_mm", "rotation_rms_deg",
              "frames_used", "tracking_lost")
    write_csv(path, (*comments, _TREND_NOTE), header, rows)


def read_rms_table(path) -> RmsTable:
    """Inverse of write_rms_table."""
    rows = _data_rows(path)[1:]
    cells = {}
    d_bins, a_bins = [], []
    for row in rows:
        d_bin = (float(row[0]), float(row[1]))
        a_bin = (float(row[2]), float(row[3]))
        if d_bin not in d_bins:
            d_bins.append(d_bin)
        if a_bin not in a_bins:
            a_bins.append(a_bin)
        cells[(d_bin, a_bin)] = RmsCell(
            translation_rms_mm=float(row[4]), rotation_rms_deg=float(row[5]),
            frames_used=int(row[6]), tracking_lost=int(row[7]))
    return RmsTable(tuple(d_bins), tuple(a_bins), cells)


def format_rms_table(table: RmsTable) -> str:
    """Human-readable grid of 'translation mm / rotation deg (used|lost)'."""
    lines = []
    header = ["distance \\ angle"] + [
        f"{a[0]:g}-{a[1]:g} deg" for a in table.angle_bins_deg]
    widths = [max(18, len(h)) for h in header]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for d_bin in table.distance_bins_cm:
        row = [f"{d_bin[0]:g}-{d_bin[1]:g} cm"]
        for a_bin in table.angle_bins_deg:
            cell = table.cell(d_bin, a_bin)
            row.append(f"{cell.translation_rms_mm:.3f}mm/"
                       f"{cell.rotation_rms_deg:.3f}deg "
                       f"({cell.frames_used}|{cell.tracking_lost})")
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def plot_rms_table(path, table: RmsTable, title: str) -> None:
    """RMS error against distance, one line per angle column."""
    fig = Figure(figsize=(7.5, 6.5), dpi=110)
    ax_t = fig.add_subplot(2, 1, 1)
    ax_r = fig.add_subplot(2, 1, 2)
    x = [0.5 * (lo + hi) for lo, hi in table.distance_bins_cm]
    for a_bin in table.angle_bins_deg:
        cells = [table.cell(d, a_bin) for d in table.distance_bins_cm]
        label = f"{a_bin[0]:g}-{a_bin[1]:g} deg"
        ax_t.plot(x, [c.translation_rms_mm for c in cells], marker="o",
                  label=label)
        ax_r.plot(x, [c.rotation_rms_deg for c in cells], marker="o",
                  label=label)
    ax_t.set_title(title)
    ax_t.set_ylabel("translation RMS (mm)")
    ax_r.set_ylabel("rotation RMS (deg)")
    ax_r.set_xlabel("viewing distance bin center (cm)")
    for ax in (ax_t, ax_r):
        ax.grid(True, alpha=0.3)
        ax.legend(title="viewing angle")
    fig.tight_layout()
    fig.savefig(path)


# --- experiment report bundles -----------------------------------------------

def _offset_comments(cfg) -> list:
    return [
        f"render_seed: {cfg.render_seed}",
        f"trajectory_seed: {cfg.trajectory.seed}",
        f"frames: {cfg.trajectory.total_frames}",
        (f"noise: pixel_sigma={cfg.noise.pixel_sigma} "
         f"blur_radius={cfg.noise.blur_radius} "
         f"gain={cfg.noise.intensity_gain_range}"),
        (f"sets: {cfg.markerset_a.set_id}"
         f"({len(cfg.markerset_a.markers)} markers) / "
         f"{cfg.markerset_b.set_id}({len(cfg.markerset_b.markers)} markers)"),
        (f"tracking: gap_tolerance={cfg.tracking.gap_tolerance_mm}mm "
         f"outlier_threshold={cfg.tracking.outlier_threshold_mm}mm "
         f"chessboard={cfg.tracking.use_chessboard}"),
    ]


def write_offset_report(out_dir, cfg, table: RmsTable, residuals) -> None:
    out_dir = _ensure_dir(out_dir)
    comments = _offset_comments(cfg)
    write_residuals(out_dir / "residuals.csv", residuals, comments)
    write_rms_table(out_dir / "rms_table.csv", table, comments)
    plot_rms_table(out_dir / "rms_by_distance.png", table,
                   "Known-offset tracking error")


def write_ablation_report(out_dir, cfg, rows, logs) -> None:
    out_dir = _ensure_dir(out_dir)
    comments = [f"render_seed: {cfg.render_seed}",
                f"trajectory_seed: {cfg.trajectory.seed}",
                f"frames_per_arm: {cfg.trajectory.total_frames}",
                f"noise: pixel_sigma={cfg.noise.pixel_sigma}"]
    for name, residuals in logs.items():
        slug = name.replace("/", "-")
        write_residuals(out_dir / f"residuals-{slug}.csv", residuals,
                        [*comments, f"arm: {name}"])
    table_rows = [(r.marker_count, int(r.chessboard),
                   repr(r.translation_rms_mm), repr(r.rotation_rms_deg),
                   r.frames_used, r.tracking_lost) for r in rows]
    write_csv(out_dir / "ablation.csv", comments,
               ("marker_count", "chessboard", "translation_rms_mm",
                "rotation_rms_deg", "frames_used", "tracking_lost"),
               table_rows)
    _plot_ablation(out_dir / "ablation.png", rows)


def read_ablation(path) -> list:
    """Inverse of the ablation.csv table."""
    rows = _data_rows(path)[1:]
    return [AblationRow(marker_count=int(r[0]), chessboard=bool(int(r[1])),
                        translation_rms_mm=float(r[2]),
                        rotation_rms_deg=float(r[3]),
                        frames_used=int(r[4]), tracking_lost=int(r[5]))
            for r in rows]


def _plot_ablation(path, rows) -> None:
    fig = Figure(figsize=(7.0, 4.5), dpi=110)
    ax = fig.add_subplot(1, 1, 1)
    labels = [f"{r.marker_count} markers\n"
              f"{'chessboard' if r.chessboard else 'corners only'}"
              for r in rows]
    ax.bar(range(len(rows)), [r.translation_rms_mm for r in rows],
           color=["tab:blue" if r.chessboard else "tab:orange" for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=9)
    ax.set_ylabel("translation RMS (mm)")
    ax.set_title("Keypoint-set ablation")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)


def write_recon_report(out_dir, cfg, comparison) -> None:
    out_dir = _ensure_dir(out_dir)
    comments = [
        f"render_seed: {cfg.render_seed}  drift_seed: {cfg.drift_seed}",
        f"frames: {cfg.n_frames}  voxel: {cfg.voxel_size_mm}mm",
        f"drift_rms_target: {cfg.drift_rms_mm}mm",
        f"noise: pixel_sigma={cfg.noise.pixel_sigma}",
        ("chain rows are scored against the truth phantom in their own "
         "reference frame; disagreement maps both measured centroids into "
         "one frame through the exact anchor pose"),
    ]
    rows = []
    for name, report in (("world", comparison.world),
                         ("anchor", comparison.anchor)):
        rows.append((name, repr(report.centroid_error_mm),
                     repr(report.radius_error_mm),
                     repr(report.fill_fraction),
                     repr(report.measured_radius_mm), report.voxel_count))
    write_csv(out_dir / "recon.csv", comments,
               ("chain", "centroid_error_mm", "radius_error_mm",
                "fill_fraction", "measured_radius_mm", "voxel_count"), rows)
    write_csv(out_dir / "recon_budget.csv", comments,
               ("frames_used", "anchor_lost", "probe_lost", "probe_rms_mm",
                "anchor_rms_mm", "drift_rms_mm", "chain_disagreement_mm"),
               [(comparison.frames_used, comparison.anchor_lost,
                 comparison.probe_lost, repr(comparison.probe_rms_mm),
                 repr(comparison.anchor_rms_mm),
                 repr(comparison.drift_rms_mm),
                 repr(comparison.chain_disagreement_mm))])
    _plot_recon(out_dir / "recon.png", comparison)


def _plot_recon(path, comparison) -> None:
    fig = Figure(figsize=(6.0, 4.2), dpi=110)
    ax = fig.add_subplot(1, 1, 1)
    names = ("world chain", "anchor chain")
    errors = (comparison.world.centroid_error_mm,
              comparison.anchor.centroid_error_mm)
    ax.bar(names, errors, color=("tab:red", "tab:green"))
    ax.axhline(comparison.voxel_size_mm, color="gray", linestyle="--",
               label=f"voxel size ({comparison.voxel_size_mm} mm)")
    ax.set_ylabel("sphere centroid error (mm)")
    ax.set_title(f"Reconstruction under {comparison.drift_rms_mm:.1f} mm "
                 "RMS localization drift")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)


def write_timing_report(out_dir, cfg, report) -> None:
    out_dir = _ensure_dir(out_dir)
    comments = [
        f"render_seed: {cfg.render_seed}",
        f"frames: {report.n_frames}  tracking_lost: {report.tracking_lost}",
        f"marker_count: {cfg.marker_count}",
        "times are per stereo frame (both eyes), OpenCV pinned to 1 thread",
    ]
    rows = [(name, repr(stats.mean_ms), repr(stats.p50_ms),
             repr(stats.p90_ms), repr(stats.p99_ms))
            for name, stats in (("extraction", report.extraction),
                                ("pose", report.pose))]
    write_csv(out_dir / "timing.csv", comments,
               ("stage", "mean_ms", "p50_ms", "p90_ms", "p99_ms"), rows)
    _plot_timing(out_dir / "timing.png", report)


def _plot_timing(path, report) -> None:
    fig = Figure(figsize=(6.5, 4.2), dpi=110)
    ax = fig.add_subplot(1, 1, 1)
    stages = ("extraction", "pose")
    stats = (report.extraction, report.pose)
    x = np.arange(len(stages))
    width = 0.2
    for offset, attr in enumerate(("mean_ms", "p50_ms", "p90_ms", "p99_ms")):
        ax.bar(x + (offset - 1.5) * width,
               [getattr(s, attr) for s in stats], width,
               label=attr.replace("_ms", ""))
    ax.set_xticks(x)
    ax.set_xticklabels(stages)
    ax.set_ylabel("time per stereo frame (ms)")
    ax.set_title("Tracking stage timing")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
