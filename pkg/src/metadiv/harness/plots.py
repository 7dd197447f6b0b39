"""Figure rendering for experiment outputs.

Every plot is redundant with a CSV written next to it; the CSV is the
source of truth and the PNG is a convenience view. Rendering is headless
(Agg) and strips writer metadata so reruns produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = [
    "plot_sweep",
    "plot_gaps",
    "plot_curve",
    "plot_layer_distances",
    "plot_pathology",
    "plot_histogram",
]

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_sweep(rows, path) -> None:
    """Diversity sweep: both coefficients against sigma_m, plus their
    correlation scatter. ``rows`` are dicts with the sweep CSV's columns."""
    sigma = [r["sigma_m"] for r in rows]
    hell = [r["hellinger_div"] for r in rows]
    hell_ci = [r["hellinger_ci"] for r in rows]
    t2v = [r["task2vec_div"] for r in rows]
    t2v_ci = [r["task2vec_ci"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.errorbar(sigma, hell, yerr=hell_ci, marker="o", label="Hellinger")
    ax1.errorbar(sigma, t2v, yerr=t2v_ci, marker="s", label="Task2Vec")
    ax1.set_xscale("log")
    ax1.set_xlabel("sigma_m")
    ax1.set_ylabel("diversity")
    ax1.legend()
    ax2.errorbar(hell, t2v, xerr=hell_ci, yerr=t2v_ci, fmt="o")
    ax2.set_xlabel("Hellinger diversity")
    ax2.set_ylabel("Task2Vec diversity")
    _finish(fig, path)


def plot_gaps(rows, path) -> None:
    """Meta-test accuracy of USL+head_lr vs MAML+maml_5 across benchmarks."""
    sigma = [r["sigma_m"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.errorbar(sigma, [r["acc_usl_headlr"] for r in rows],
                yerr=[r["combined_ci"] for r in rows], marker="o", label="USL + head_lr")
    ax.errorbar(sigma, [r["acc_maml5"] for r in rows],
                yerr=[r["combined_ci"] for r in rows], marker="s", label="MAML + maml_5")
    ax.set_xscale("log")
    ax.set_xlabel("sigma_m")
    ax.set_ylabel("meta-test accuracy")
    ax.legend()
    _finish(fig, path)


def plot_curve(curve, path, title: str = "") -> None:
    """Learning curve: training loss plus per-split accuracies over steps."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    splits = sorted({p.split for p in curve})
    for split in splits:
        xs = [p.step for p in curve if p.split == split and p.loss is not None]
        ys = [p.loss for p in curve if p.split == split and p.loss is not None]
        if xs:
            ax1.plot(xs, ys, label=split)
        xa = [p.step for p in curve if p.split == split and p.accuracy is not None]
        ya = [p.accuracy for p in curve if p.split == split and p.accuracy is not None]
        if xa:
            ax2.plot(xa, ya, label=split)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax2.set_xlabel("step")
    ax2.set_ylabel("accuracy")
    for ax in (ax1, ax2):
        if ax.lines:
            ax.legend()
    if title:
        fig.suptitle(title)
    _finish(fig, path)


def plot_layer_distances(rows, path) -> None:
    """Grouped bars of per-layer distances with CI whiskers. ``rows`` are
    LayerDistanceRow records."""
    layers = []
    for r in rows:
        if r.layer not in layers:
            layers.append(r.layer)
    metrics = []
    for r in rows:
        if r.metric not in metrics:
            metrics.append(r.metric)
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(layers), 3.6))
    width = 0.8 / max(1, len(metrics))
    cell = {(r.layer, r.metric): r for r in rows}
    for k, metric in enumerate(metrics):
        xs, ys, es = [], [], []
        for i, layer in enumerate(layers):
            r = cell.get((layer, metric))
            if r is None:
                continue
            xs.append(i + (k - (len(metrics) - 1) / 2) * width)
            ys.append(r.mean)
            es.append(r.ci95)
        ax.bar(xs, ys, width=width, yerr=es, label=metric)
    ax.set_xticks(range(len(layers)))
    ax.set_xticklabels(layers)
    ax.set_ylabel("distance")
    ax.legend()
    _finish(fig, path)


def plot_pathology(cells, path) -> None:
    """Similarity of unrelated random matrices: one line per feature dim."""
    dims = sorted({c.n_features for c in cells})
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for d in dims:
        pts = sorted((c.n_examples, c.similarity) for c in cells if c.n_features == d)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"D={d}")
    ax.set_xscale("log")
    ax.set_xlabel("examples")
    ax.set_ylabel("SVCCA similarity (unrelated data)")
    ax.legend()
    _finish(fig, path)


def plot_histogram(bins, path) -> None:
    """Bar chart of a pairwise-distance histogram (HistogramBin records)."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    lefts = [b.lo for b in bins]
    widths = [b.hi - b.lo for b in bins]
    ax.bar(lefts, [b.count for b in bins], width=widths, align="edge", edgecolor="black")
    ax.set_xlabel("cosine distance between task embeddings")
    ax.set_ylabel("pair count")
    _finish(fig, path)
