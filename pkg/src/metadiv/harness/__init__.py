"""Experiment harness: configuration, manifests, pipelines, and plotting."""

from __future__ import annotations

from .config import (
    EXPERIMENTS,
    ConfigError,
    RunConfig,
    SeedSet,
    TaskShape,
    UslConfig,
    load_config,
)
from .experiments import (
    run_correlate,
    run_div_sweep,
    run_eval_matrix,
    run_experiment,
    run_hist,
    run_pathology,
    run_repsim,
    run_train,
)
from .manifest import MANIFEST_NAME, RunManifest, sha256_file

__all__ = [
    "EXPERIMENTS",
    "ConfigError",
    "RunConfig",
    "SeedSet",
    "TaskShape",
    "UslConfig",
    "load_config",
    "run_correlate",
    "run_div_sweep",
    "run_eval_matrix",
    "run_experiment",
    "run_hist",
    "run_pathology",
    "run_repsim",
    "run_train",
    "MANIFEST_NAME",
    "RunManifest",
    "sha256_file",
]
