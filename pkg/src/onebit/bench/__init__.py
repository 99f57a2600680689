"""Experiment harness: config files, Monte-Carlo sweeps and the CLI."""

from onebit.bench.config import DetectorSpec, ExperimentConfig, parse_config, parse_config_text
from onebit.bench.sweeps import (
    ResultRow,
    ScatterDump,
    dump_constellation,
    run_ber_sweep,
    run_csi_sweep,
    run_stage_ablation,
    train_from_config,
)

__all__ = [
    "DetectorSpec",
    "ExperimentConfig",
    "ResultRow",
    "ScatterDump",
    "dump_constellation",
    "parse_config",
    "parse_config_text",
    "run_ber_sweep",
    "run_csi_sweep",
    "run_stage_ablation",
    "train_from_config",
]
