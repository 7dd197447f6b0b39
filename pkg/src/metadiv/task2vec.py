"""Task embeddings from the Fisher information diagonal of a fixed probe.

A task's embedding is computed by freezing a randomly initialized feature
extractor (the probe), fitting only a logistic head to the task's combined
support and query points, and then estimating the diagonal of the Fisher
Information Matrix over the feature-extractor weights: the expectation of
the squared gradient of log p(y|x), with y drawn from the model's own
predictive distribution. Distances between embeddings are cosine distances,
and a benchmark's diversity coefficient is the mean distance over all
distinct pairs of sampled tasks.

The combined point set is canonicalized (sorted by label, then value)
before fitting and sampling, so the embedding is invariant to how points
were split between support and query.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, UndefinedDistanceError
from .gaussbench import DiversityResult, FewShotTask
from .nnet import MlpConfig, ParameterSet, fit_logistic_head, init_mlp
from .numerics import RngStream, mean_ci95

__all__ = [
    "ProbeNetwork",
    "TaskEmbedding",
    "HistogramBin",
    "make_probe",
    "fit_task_head",
    "fim_diag_embedding",
    "cosine_distance",
    "embed_tasks",
    "diversity_from_embeddings",
    "diversity_coefficient",
    "distance_histogram",
    "worker_count",
]


@dataclass(frozen=True)
class ProbeNetwork:
    """A fixed random feature extractor; embeddings are only comparable when
    they come from the same probe."""

    feature_params: ParameterSet
    config: MlpConfig
    probe_seed: int


@dataclass(frozen=True)
class TaskEmbedding:
    """Nonnegative FIM-diagonal vector over the probe's feature weights."""

    values: np.ndarray
    task_id: str
    n_mc: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("embedding contains non-finite entries")
        if np.any(v < 0):
            raise InvalidInputError("embedding entries must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def make_probe(config: MlpConfig, seed: int) -> ProbeNetwork:
    """Deterministically initialize a probe from a seed; the head these
    initial parameters carry is a placeholder, refit per task."""
    params = init_mlp(config, RngStream(int(seed)))
    return ProbeNetwork(feature_params=params, config=config, probe_seed=int(seed))


def _combined_canonical(task: FewShotTask):
    """Support+query points sorted by (label, value): a split-independent order."""
    x = np.concatenate([task.support_x.ravel(), task.query_x.ravel()])
    y = np.concatenate([task.support_y, task.query_y])
    order = np.lexsort((x, y))
    return x[order].reshape(-1, 1), y[order]


def _feature_pass(params: ParameterSet, x: np.ndarray):
    """Hidden activations and relu masks for the manual FIM backprop."""
    acts = [x]
    masks = []
    h = x
    for i in range(params.n_layers - 1):
        z = h @ params.weights[i] + params.biases[i]
        mask = (z > 0.0).astype(np.float64)
        h = z * mask
        masks.append(mask)
        acts.append(h)
    return acts, masks


def fit_task_head(probe: ProbeNetwork, task: FewShotTask):
    """Logistic head on the probe features of the combined task points;
    the probe's feature weights stay untouched."""
    x, y = _combined_canonical(task)
    acts, _ = _feature_pass(probe.feature_params, x)
    return fit_logistic_head(acts[-1], y)


def fim_diag_embedding(
    probe: ProbeNetwork,
    head,
    task: FewShotTask,
    n_mc: int = 5,
    rng: RngStream | None = None,
) -> TaskEmbedding:
    """Monte Carlo FIM diagonal over feature-extractor weights.

    Every combined task point enters once per repetition; labels are sampled
    from the model's predictive distribution each repetition. Per-example
    squared weight gradients reduce to products of squared activations and
    squared backpropagated deltas, so the whole estimate is batched — no
    per-example loops.
    """
    if rng is None:
        raise InvalidInputError("an RngStream is required")
    if n_mc < 1:
        raise InvalidInputError("n_mc must be >= 1")
    head_w, head_b = head
    params = probe.feature_params
    x, _ = _combined_canonical(task)
    acts, masks = _feature_pass(params, x)
    logits = acts[-1] @ head_w + head_b
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    n_points = x.shape[0]
    n_layers = params.n_layers - 1
    sq_w = [np.zeros_like(params.weights[i]) for i in range(n_layers)]
    sq_b = [np.zeros_like(params.biases[i]) for i in range(n_layers)]
    gen = rng.generator
    cdf = np.cumsum(p, axis=1)
    for _ in range(n_mc):
        u = gen.random((n_points, 1))
        sampled = np.minimum((u > cdf).sum(axis=1), p.shape[1] - 1)
        onehot = np.zeros_like(p)
        onehot[np.arange(n_points), sampled] = 1.0
        # d log p(y|x) / d logits = onehot - p; push back through the features
        delta = (onehot - p) @ head_w.T
        for layer in range(n_layers - 1, -1, -1):
            dz = delta * masks[layer]
            sq_w[layer] += (acts[layer] ** 2).T @ (dz**2)
            sq_b[layer] += (dz**2).sum(axis=0)
            if layer > 0:
                delta = dz @ params.weights[layer].T
    scale = 1.0 / (n_points * n_mc)
    parts = []
    for layer in range(n_layers):
        parts.append((sq_w[layer] * scale).ravel())
        parts.append(sq_b[layer] * scale)
    return TaskEmbedding(np.concatenate(parts), task.task_id, n_mc)


def cosine_distance(e1: TaskEmbedding, e2: TaskEmbedding) -> float:
    """1 - cos(e1, e2); embeddings are nonnegative so this lies in [0, 1]."""
    a = e1.values
    b = e2.values
    if a.size != b.size:
        raise InvalidInputError(f"embedding lengths differ: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedDistanceError("cosine distance undefined for a zero embedding")
    return float(np.clip(1.0 - float(a @ b) / (na * nb), 0.0, 1.0))


def worker_count(requested: int | None = None) -> int:
    """Effective worker cap: the requested count bounded by METADIV_THREADS
    (default 1, i.e. serial)."""
    env = os.environ.get("METADIV_THREADS", "").strip()
    cap = int(env) if env else 1
    if cap < 1:
        cap = 1
    if requested is None:
        return cap
    return max(1, min(int(requested), cap))


def embed_task(probe: ProbeNetwork, task: FewShotTask, n_mc: int, rng: RngStream) -> TaskEmbedding:
    """Fit the task head and compute the FIM embedding in one call."""
    head = fit_task_head(probe, task)
    return fim_diag_embedding(probe, head, task, n_mc=n_mc, rng=rng)


def embed_tasks(
    task_source,
    n_tasks: int,
    probe: ProbeNetwork,
    n_mc: int = 5,
    rng: RngStream | None = None,
    n_workers: int | None = None,
) -> list[TaskEmbedding]:
    """Sample and embed ``n_tasks`` tasks from ``task_source``, a callable
    mapping an owned RngStream to a FewShotTask.

    Work item i always uses streams derived at index i, so results are
    identical for any worker count.
    """
    if rng is None:
        raise InvalidInputError("an RngStream is required")
    if n_tasks < 2:
        raise InvalidInputError("need n_tasks >= 2")

    def one(i: int) -> TaskEmbedding:
        task = task_source(rng.derive(2 * i))
        return embed_task(probe, task, n_mc, rng.derive(2 * i + 1))

    workers = worker_count(n_workers)
    embeddings: list = [None] * n_tasks
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, emb in enumerate(pool.map(one, range(n_tasks))):
                embeddings[i] = emb
    else:
        for i in range(n_tasks):
            embeddings[i] = one(i)
    return embeddings


def diversity_from_embeddings(embeddings) -> DiversityResult:
    """Mean cosine distance over all (n^2-n)/2 distinct embedding pairs,
    with the full symmetric pairwise matrix attached."""
    n_tasks = len(embeddings)
    if n_tasks < 2:
        raise InvalidInputError("need at least 2 embeddings")
    pairwise = np.zeros((n_tasks, n_tasks))
    pair_values = []
    for i in range(n_tasks):
        for j in range(i + 1, n_tasks):
            d = cosine_distance(embeddings[i], embeddings[j])
            pairwise[i, j] = d
            pairwise[j, i] = d
            pair_values.append(d)
    mean, ci = mean_ci95(pair_values)
    return DiversityResult(
        mean=mean,
        ci95=ci,
        n_tasks=n_tasks,
        n_pairs=(n_tasks * n_tasks - n_tasks) // 2,
        pairwise=pairwise,
    )


def diversity_coefficient(
    task_source,
    n_tasks: int,
    probe: ProbeNetwork,
    n_mc: int = 5,
    rng: RngStream | None = None,
    n_workers: int | None = None,
) -> DiversityResult:
    """Expected cosine distance between embeddings of distinct sampled tasks.

    Each of the n_tasks tasks is embedded once; the mean and CI are over
    all (n^2-n)/2 distinct pairs.
    """
    return diversity_from_embeddings(
        embed_tasks(task_source, n_tasks, probe, n_mc=n_mc, rng=rng, n_workers=n_workers)
    )


@dataclass(frozen=True)
class HistogramBin:
    lo: float
    hi: float
    count: int


def distance_histogram(result: DiversityResult, n_bins: int) -> list[HistogramBin]:
    """Equal-width histogram of the pairwise distances; counts sum to the
    pair count."""
    if result.pairwise is None:
        raise InvalidInputError("result carries no pairwise matrix")
    if n_bins < 1:
        raise InvalidInputError("n_bins must be >= 1")
    n = result.n_tasks
    iu = np.triu_indices(n, k=1)
    values = result.pairwise[iu]
    counts, edges = np.histogram(values, bins=n_bins)
    return [
        HistogramBin(float(edges[i]), float(edges[i + 1]), int(counts[i]))
        for i in range(n_bins)
    ]
