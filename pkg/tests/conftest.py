"""Shared fixtures and constants for the test suite.

The acceptance tests need trained models, long Monte Carlo sweeps, and
500-task evaluation cells.  Those artifacts are deterministic, so they are
cached under ``tests/_artifacts`` keyed by their full settings; delete that
directory to force a retrain.  Everything else in here is cheap.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from metadiv.gaussbench import BenchmarkSpec, GaussianBenchmark
from metadiv.metalearn import (
    AdaptationMethod,
    MamlConfig,
    maml_train,
    meta_test,
    usl_train,
)
from metadiv.nnet import MlpConfig, init_mlp, load_checkpoint, save_checkpoint
from metadiv.numerics import RngStream

ARTIFACTS = Path(__file__).resolve().parent / "_artifacts"

# One low-diversity and one high-diversity benchmark anchor the training
# experiments; the model architecture and seeds are shared by every
# acceptance test so all comparisons are like for like.
SPEC_LOW = BenchmarkSpec(0.0, 0.01, 1.0, 0.01)
SPEC_HIGH = BenchmarkSpec(0.0, 1000.0, 1.0, 0.01)
MODEL = MlpConfig(input_size=1, hidden_sizes=(128, 128), output_size=5)
BENCH_SEED = 101
TRAIN_SEED = 202
EVAL_SEED = 303
PROBE_SEED = 404
EVAL_TASKS = 500

# Desk-scale budgets.  MAML runs 2000 second-order outer iterations; USL
# runs 25 epochs over the union of the 100 meta-train classes.  Both share
# the architecture and the Adam settings (lr 0.001, default betas).
MAML_BUDGET = dict(
    inner_lr=0.1,
    inner_steps=5,
    meta_batch=25,
    iterations=2000,
    outer_lr=0.001,
    second_order=True,
    eval_interval=500,
    n_val_tasks=50,
)
USL_BUDGET = dict(epochs=25, batch_size=100, eval_interval=25, n_val_tasks=10, outer_lr=0.001)

# Stream slots under TRAIN_SEED, one per (init, benchmark) pair.
TRAIN_STREAM = {
    ("maml", "low"): 0,
    ("usl", "low"): 1,
    ("random", "low"): 2,
    ("maml", "high"): 3,
    ("usl", "high"): 4,
    ("random", "high"): 5,
}

# Stream slots under EVAL_SEED.  0..13 belong to the diversity sweep (two
# per spec), 100/101 to the shared evaluation task sets, 110 to the
# layerwise-distance task set, 120/121 to the Bayes oracle draws.
EVAL_STREAM = {"low": 100, "high": 101}
LAYERWISE_STREAM = 110
BAYES_STREAM = {"low": 120, "high": 121}

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    """Collect a criterion verdict for the end-of-run summary."""
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(session, config, items):
    # Heavy end-to-end criteria run after the unit suite (stable sort keeps
    # the rest of the collection order).
    items.sort(key=lambda item: "test_acceptance.py" in item.nodeid)


def make_bench(key: str) -> GaussianBenchmark:
    return GaussianBenchmark.generate(SPEC_LOW if key == "low" else SPEC_HIGH, BENCH_SEED)


def eval_rng(key: str) -> RngStream:
    """Evaluation stream for one benchmark.  Every evaluation cell on that
    benchmark reuses it, so all methods score the same 500 episodes."""
    return RngStream(EVAL_SEED).derive(EVAL_STREAM[key])


def _budget_meta(init: str, key: str) -> dict:
    budget = MAML_BUDGET if init == "maml" else USL_BUDGET
    meta = {
        "init": init,
        "bench": key,
        "bench_seed": BENCH_SEED,
        "train_seed": TRAIN_SEED,
        "stream": TRAIN_STREAM[(init, key)],
    }
    meta.update(budget)
    return {k: str(v) for k, v in meta.items()}


def trained_params(init: str, key: str):
    """Train (or load from cache) the model for one (init, benchmark) slot."""
    path = ARTIFACTS / f"{init}_{key}.json"
    want = _budget_meta(init, key)
    if path.exists():
        params, _, _, meta = load_checkpoint(path)
        if meta == want:
            return params
    bench = make_bench(key)
    rng = RngStream(TRAIN_SEED).derive(TRAIN_STREAM[(init, key)])
    if init == "maml":
        params, _ = maml_train(bench, MODEL, MamlConfig(**MAML_BUDGET), rng)
    else:
        params, _ = usl_train(bench, MODEL, rng, **USL_BUDGET)
    ARTIFACTS.mkdir(exist_ok=True)
    save_checkpoint(path, params, MODEL, TRAIN_SEED, metadata=want)
    return params


@pytest.fixture(scope="session")
def bench_low():
    return make_bench("low")


@pytest.fixture(scope="session")
def bench_high():
    return make_bench("high")


@pytest.fixture(scope="session")
def acceptance_models():
    """Trained and random parameter sets keyed by (init, benchmark)."""
    out = {}
    for key in ("low", "high"):
        out[("random", key)] = init_mlp(
            MODEL, RngStream(TRAIN_SEED).derive(TRAIN_STREAM[("random", key)])
        )
        for init in ("maml", "usl"):
            out[(init, key)] = trained_params(init, key)
    return out


class EvalStore:
    """Meta-test cells cached on disk, keyed (init, benchmark, method).

    Cells sharing a benchmark share the evaluation stream, hence the task
    set, so accuracies are directly comparable across inits and methods.
    """

    def __init__(self, models):
        self.models = models

    def cell(self, init: str, key: str, method: AdaptationMethod, n_tasks: int = EVAL_TASKS):
        path = ARTIFACTS / f"eval_{init}_{key}_{method.label}_{n_tasks}.json"
        if path.exists():
            return json.loads(path.read_text())
        res = meta_test(
            self.models[(init, key)],
            make_bench(key),
            "meta_test",
            method,
            n_tasks,
            eval_rng(key),
            init_label=init,
        )
        out = {
            "init": init,
            "bench": key,
            "method": method.label,
            "accuracy": res.accuracy,
            "ci95": res.ci95,
            "n_tasks": res.n_tasks,
        }
        ARTIFACTS.mkdir(exist_ok=True)
        path.write_text(json.dumps(out) + "\n")
        return out


@pytest.fixture(scope="session")
def eval_store(acceptance_models):
    return EvalStore(acceptance_models)
