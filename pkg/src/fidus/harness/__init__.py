"""Benchmark harness: scripted experiments over the synthetic stereo bench,
delimited result logs, and rendered figures."""

from fidus.harness.experiments import (
    AblationConfig,
    AblationRow,
    FrameResidual,
    OffsetExperimentConfig,
    ReconComparison,
    ReconExperimentConfig,
    RmsCell,
    RmsTable,
    StageStats,
    TimingConfig,
    TimingReport,
    default_pair_offset,
    run_ablation,
    run_offset_experiment,
    run_recon_experiment,
    run_timing,
)

__all__ = [
    "AblationConfig",
    "AblationRow",
    "FrameResidual",
    "OffsetExperimentConfig",
    "ReconComparison",
    "ReconExperimentConfig",
    "RmsCell",
    "RmsTable",
    "StageStats",
    "TimingConfig",
    "TimingReport",
    "default_pair_offset",
    "run_ablation",
    "run_offset_experiment",
    "run_recon_experiment",
    "run_timing",
]
