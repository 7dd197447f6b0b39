"""metadiv: task-diversity measurement and fair meta-learning comparison
on synthetic Gaussian few-shot benchmarks, with representation-similarity
analysis tools.

The package splits into:

- ``numerics``: shared linear algebra, statistics, and seeded RNG streams
- ``gaussbench``: synthetic 1-D Gaussian few-shot benchmarks and the
  closed-form Hellinger diversity
- ``task2vec``: Fisher-information task embeddings and the diversity
  coefficient
- ``nnet``: a small reverse-mode autodiff tape, MLP, Adam, and a convex
  logistic head solver
- ``metalearn``: episodic (MAML) and union-supervised trainers plus the
  meta-test evaluation matrix
- ``repsim``: SVCCA / PWCCA / linear CKA / orthogonal Procrustes distances
  with sample-size safety checks
- ``harness``: configuration, manifests, experiment pipelines, and the CLI
"""

from __future__ import annotations

__version__ = "0.1.0"

from . import gaussbench, harness, metalearn, nnet, numerics, repsim, task2vec
from .errors import (
    CcaOvershootError,
    ConvergenceError,
    InsufficientDataError,
    InvalidInputError,
    SafetyMarginWarning,
    TrainingDivergedError,
    UndefinedCorrelationError,
    UndefinedDistanceError,
)
from .gaussbench import (
    BenchmarkSpec,
    GaussianBenchmark,
    bayes_accuracy,
    hellinger_diversity,
    hellinger_squared,
    sample_task,
)
from .metalearn import (
    AdaptationMethod,
    MamlConfig,
    adapt,
    eval_matrix,
    maml_train,
    meta_test,
    usl_train,
)
from .nnet import MlpConfig, ParameterSet, forward, init_mlp
from .numerics import RngStream, mean_ci95, pearson
from .repsim import (
    LayerMatrix,
    SafetyPolicy,
    lincka_distance,
    opd_distance,
    pwcca_distance,
    svcca_distance,
)
from .task2vec import ProbeNetwork, TaskEmbedding, diversity_coefficient, make_probe

__all__ = [
    "__version__",
    "gaussbench",
    "harness",
    "metalearn",
    "nnet",
    "numerics",
    "repsim",
    "task2vec",
    "BenchmarkSpec",
    "GaussianBenchmark",
    "bayes_accuracy",
    "hellinger_diversity",
    "hellinger_squared",
    "sample_task",
    "AdaptationMethod",
    "MamlConfig",
    "adapt",
    "eval_matrix",
    "maml_train",
    "meta_test",
    "usl_train",
    "MlpConfig",
    "ParameterSet",
    "forward",
    "init_mlp",
    "RngStream",
    "mean_ci95",
    "pearson",
    "LayerMatrix",
    "SafetyPolicy",
    "lincka_distance",
    "opd_distance",
    "pwcca_distance",
    "svcca_distance",
    "ProbeNetwork",
    "TaskEmbedding",
    "diversity_coefficient",
    "make_probe",
    "CcaOvershootError",
    "ConvergenceError",
    "InsufficientDataError",
    "InvalidInputError",
    "SafetyMarginWarning",
    "TrainingDivergedError",
    "UndefinedCorrelationError",
    "UndefinedDistanceError",
]
