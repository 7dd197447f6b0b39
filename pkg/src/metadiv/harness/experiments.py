"""End-to-end experiment pipelines.

Each runner consumes a validated RunConfig, writes its outputs (CSV as the
source of truth, PNG views next to them unless plots are disabled) under
one output directory, and returns the list of files it wrote. Randomness
is drawn only from the config's named seeds through derived streams, so a
rerun with the same config reproduces every CSV byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from ..errors import InsufficientDataError, InvalidInputError
from ..gaussbench import GaussianBenchmark, hellinger_diversity, sample_task
from ..metalearn import (
    AdaptationMethod,
    eval_matrix,
    layerwise_model_distance,
    maml_train,
    save_curve_csv,
    save_eval_csv,
    usl_train,
)
from ..nnet import init_mlp, load_checkpoint, save_checkpoint
from ..numerics import RngStream, pearson, save_matrix_csv
from ..repsim import pathology_curve
from ..task2vec import (
    diversity_from_embeddings,
    distance_histogram,
    embed_tasks,
    make_probe,
)
from .config import RunConfig
from . import plots

__all__ = [
    "run_div_sweep",
    "run_train",
    "run_eval_matrix",
    "run_repsim",
    "run_pathology",
    "run_hist",
    "run_correlate",
    "run_experiment",
]

log = logging.getLogger(__name__)

EVAL_METHODS = (
    AdaptationMethod.none(),
    AdaptationMethod.maml(5),
    AdaptationMethod.maml(10),
    AdaptationMethod.head_lr(),
)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _read_csv_dicts(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _task_source(classes, shape):
    def source(rng):
        return sample_task(classes, shape.n_way, shape.k_support, shape.k_query, rng)

    return source


def run_div_sweep(config: RunConfig, out_dir) -> list:
    """Hellinger and Task2Vec diversity per benchmark spec, one CSV row each.

    One fixed probe (probe seed) serves every spec, so the Task2Vec column
    is comparable across rows.
    """
    out = Path(out_dir)
    probe = make_probe(config.model, config.seeds.probe)
    ev = RngStream(config.seeds.eval)
    rows = []
    dict_rows = []
    for i, spec in enumerate(config.benchmarks):
        hell = hellinger_diversity(spec, n_pairs=config.n_pairs, rng=ev.derive(2 * i))
        bench = GaussianBenchmark.generate(spec, config.seeds.benchmark)
        div = diversity_from_embeddings(
            embed_tasks(
                _task_source(bench.split("meta_train"), config.task),
                config.n_tasks,
                probe,
                n_mc=config.n_mc,
                rng=ev.derive(2 * i + 1),
                n_workers=config.n_workers,
            )
        )
        rows.append(
            (
                spec.mu_m,
                spec.sigma_m,
                spec.mu_s,
                spec.sigma_s,
                hell.mean,
                hell.ci95,
                div.mean,
                div.ci95,
                div.n_pairs,
            )
        )
        dict_rows.append(
            {
                "sigma_m": spec.sigma_m,
                "hellinger_div": hell.mean,
                "hellinger_ci": hell.ci95,
                "task2vec_div": div.mean,
                "task2vec_ci": div.ci95,
            }
        )
        log.info(
            "div_sweep: sigma_m=%g hellinger=%.6g task2vec=%.6g",
            spec.sigma_m,
            hell.mean,
            div.mean,
        )
    files = [
        _write_csv(
            out / "sweep.csv",
            (
                "mu_m",
                "sigma_m",
                "mu_s",
                "sigma_s",
                "hellinger_div",
                "hellinger_ci",
                "task2vec_div",
                "task2vec_ci",
                "n_pairs",
            ),
            rows,
        )
    ]
    if config.plots:
        plots.plot_sweep(dict_rows, out / "sweep.png")
        files.append(out / "sweep.png")
    return files


def _train_one(method: str, config: RunConfig, bench: GaussianBenchmark, rng: RngStream):
    t = config.task
    if method == "maml":
        return maml_train(
            bench,
            config.model,
            config.maml,
            rng,
            n_way=t.n_way,
            k_support=t.k_support,
            k_query=t.k_query,
        )
    return usl_train(
        bench,
        config.model,
        rng,
        epochs=config.usl.epochs,
        batch_size=config.usl.batch_size,
        eval_interval=config.usl.eval_interval,
        n_val_tasks=config.usl.n_val_tasks,
        outer_lr=config.usl.outer_lr,
        n_way=t.n_way,
        k_support=t.k_support,
        k_query=t.k_query,
    )


def run_train(config: RunConfig, out_dir) -> list:
    """Train the requested methods on each benchmark; write a checkpoint and
    a learning-curve CSV (plus plot) per (spec, method)."""
    out = Path(out_dir)
    tr = RngStream(config.seeds.train)
    files = []
    for i, spec in enumerate(config.benchmarks):
        bench = GaussianBenchmark.generate(spec, config.seeds.benchmark)
        for method in config.train_methods:
            rng = tr.derive(3 * i) if method == "maml" else tr.derive(3 * i + 1)
            params, curve = _train_one(method, config, bench, rng)
            meta = {
                "method": method,
                "spec": list(spec.as_tuple()),
                "benchmark_seed": config.seeds.benchmark,
            }
            ckpt = out / f"{method}_{i}.json"
            save_checkpoint(ckpt, params, config.model, config.seeds.train, metadata=meta)
            curve_csv = out / f"{method}_curve_{i}.csv"
            save_curve_csv(curve_csv, curve)
            files += [ckpt, curve_csv]
            if config.plots:
                png = out / f"{method}_curve_{i}.png"
                plots.plot_curve(curve, png, title=f"{method} sigma_m={spec.sigma_m:g}")
                files.append(png)
            log.info("train: %s on sigma_m=%g done", method, spec.sigma_m)
    return files


def _checkpoint_path(label: str, index: int, config: RunConfig):
    entry = config.checkpoints.get(label)
    if entry is None:
        return None
    if isinstance(entry, str):
        if len(config.benchmarks) > 1:
            raise InvalidInputError(
                f"checkpoints[{label!r}] must be a list with one path per benchmark"
            )
        return entry
    return entry[index]


def _get_params(label: str, index: int, config: RunConfig, bench, rng: RngStream):
    path = _checkpoint_path(label, index, config)
    if path is not None:
        params, _, _, _ = load_checkpoint(path)
        return params
    if config.train_inline:
        params, _ = _train_one(label, config, bench, rng)
        return params
    raise InvalidInputError(
        f"eval_matrix needs checkpoints[{label!r}] or train_inline=true"
    )


def run_eval_matrix(config: RunConfig, out_dir) -> list:
    """Full (init x adaptation) accuracy matrix per benchmark plus the
    cross-benchmark USL-vs-MAML gap table."""
    out = Path(out_dir)
    ev = RngStream(config.seeds.eval)
    tr = RngStream(config.seeds.train)
    t = config.task
    files = []
    gap_rows = []
    gap_dicts = []
    for i, spec in enumerate(config.benchmarks):
        bench = GaussianBenchmark.generate(spec, config.seeds.benchmark)
        inits = {
            "random": init_mlp(config.model, tr.derive(3 * i + 2)),
            "maml": _get_params("maml", i, config, bench, tr.derive(3 * i)),
            "usl": _get_params("usl", i, config, bench, tr.derive(3 * i + 1)),
        }
        rows = eval_matrix(
            inits,
            list(EVAL_METHODS),
            bench,
            config.n_tasks,
            ev.derive(i),
            split="meta_test",
            n_way=t.n_way,
            k_support=t.k_support,
            k_query=t.k_query,
            inner_lr=config.maml.inner_lr,
        )
        table = out / f"eval_matrix_{i}.csv"
        save_eval_csv(table, rows)
        files.append(table)
        cell = {(r.init_label, r.adaptation.label): r for r in rows}
        usl_h = cell[("usl", "head_lr")]
        maml_5 = cell[("maml", "maml_5")]
        maml_h = cell[("maml", "head_lr")]
        overlap = abs(maml_h.accuracy - usl_h.accuracy) <= (maml_h.ci95 + usl_h.ci95)
        gap_rows.append(
            (
                spec.sigma_m,
                usl_h.accuracy,
                maml_5.accuracy,
                usl_h.accuracy - maml_5.accuracy,
                usl_h.ci95 + maml_5.ci95,
                maml_h.accuracy,
                overlap,
            )
        )
        gap_dicts.append(
            {
                "sigma_m": spec.sigma_m,
                "acc_usl_headlr": usl_h.accuracy,
                "acc_maml5": maml_5.accuracy,
                "combined_ci": usl_h.ci95 + maml_5.ci95,
            }
        )
        log.info(
            "eval_matrix: sigma_m=%g gap=%.4f", spec.sigma_m, usl_h.accuracy - maml_5.accuracy
        )
    files.append(
        _write_csv(
            out / "gaps.csv",
            (
                "sigma_m",
                "acc_usl_headlr",
                "acc_maml5",
                "gap",
                "combined_ci",
                "acc_maml_headlr",
                "headlr_overlap",
            ),
            gap_rows,
        )
    )
    if config.plots:
        plots.plot_gaps(gap_dicts, out / "gaps.png")
        files.append(out / "gaps.png")
    return files


def run_repsim(config: RunConfig, out_dir) -> list:
    """Layer-wise representation distances between two adapted checkpoints.

    The evaluation batch is n_way * repsim_k_query query points per task,
    sized by config to satisfy the safety policy for the widest layer.
    """
    out = Path(out_dir)
    for side in ("a", "b"):
        if _checkpoint_path(side, 0, config) is None:
            raise InvalidInputError(f"repsim needs checkpoints[{side!r}]")
    params_a, _, _, _ = load_checkpoint(_checkpoint_path("a", 0, config))
    params_b, _, _, _ = load_checkpoint(_checkpoint_path("b", 0, config))
    adapt_a = config.adapt_a or AdaptationMethod.none()
    adapt_b = config.adapt_b or AdaptationMethod.none()
    spec = config.benchmarks[0]
    bench = GaussianBenchmark.generate(spec, config.seeds.benchmark)
    t = config.task
    ev = RngStream(config.seeds.eval)
    task_rng = ev.derive(0)
    tasks = [
        sample_task(
            bench.split("meta_test"), t.n_way, t.k_support, config.repsim_k_query, task_rng.derive(j)
        )
        for j in range(config.repsim_n_tasks)
    ]

    def borrowed_head(own, other, method):
        if method.kind != "maml_k" or own.head_width() == t.n_way:
            return None
        if other.head_width() == t.n_way:
            return (other.weights[-1], other.biases[-1])
        log.info("repsim: zero head for a %d-way model under %s", own.head_width(), method.label)
        return (np.zeros((own.weights[-1].shape[0], t.n_way)), np.zeros(t.n_way))

    rows = layerwise_model_distance(
        params_a,
        params_b,
        adapt_a,
        adapt_b,
        tasks,
        metric=("svcca", "pwcca", "lincka", "opd"),
        head_init_a=borrowed_head(params_a, params_b, adapt_a),
        head_init_b=borrowed_head(params_b, params_a, adapt_b),
        rng=ev.derive(1),
        inner_lr=config.maml.inner_lr,
    )
    layers = []
    for r in rows:
        if r.layer not in layers:
            layers.append(r.layer)
    cell = {(r.layer, r.metric): r for r in rows}
    table_rows = []
    for layer in layers:
        row = [layer]
        for m in ("svcca", "pwcca", "lincka", "opd"):
            r = cell.get((layer, m))
            # undefined cells (metric dropped on every task) stay empty
            row += ["", ""] if r is None else [r.mean, r.ci95]
        any_row = next(r for (l, _), r in cell.items() if l == layer)
        row.append(any_row.risky)
        table_rows.append(row)
    files = [
        _write_csv(
            out / "layer_distances.csv",
            (
                "layer",
                "svcca",
                "svcca_ci",
                "pwcca",
                "pwcca_ci",
                "lincka",
                "lincka_ci",
                "opd",
                "opd_ci",
                "risky",
            ),
            table_rows,
        )
    ]
    if config.plots:
        plots.plot_layer_distances(rows, out / "layer_distances.png")
        files.append(out / "layer_distances.png")
    return files


def run_pathology(config: RunConfig, out_dir) -> list:
    """Similarity of unrelated random matrices over a (dim, examples) grid."""
    out = Path(out_dir)
    cells = pathology_curve(
        config.pathology_dims,
        config.pathology_n_points,
        RngStream(config.seeds.eval),
        n_seeds=config.pathology_n_seeds,
    )
    files = [
        _write_csv(
            out / "pathology.csv",
            ("n_features", "n_examples", "similarity", "n_seeds"),
            [(c.n_features, c.n_examples, c.similarity, c.seeds) for c in cells],
        )
    ]
    if config.plots:
        plots.plot_pathology(cells, out / "pathology.png")
        files.append(out / "pathology.png")
    return files


def run_hist(config: RunConfig, out_dir) -> list:
    """Pairwise Task2Vec distance distribution for one benchmark: histogram
    CSV, full pairwise matrix, summary JSON, optional embedding dump."""
    out = Path(out_dir)
    spec = config.benchmarks[0]
    bench = GaussianBenchmark.generate(spec, config.seeds.benchmark)
    probe = make_probe(config.model, config.seeds.probe)
    embeddings = embed_tasks(
        _task_source(bench.split("meta_train"), config.task),
        config.n_tasks,
        probe,
        n_mc=config.n_mc,
        rng=RngStream(config.seeds.eval),
        n_workers=config.n_workers,
    )
    result = diversity_from_embeddings(embeddings)
    bins = distance_histogram(result, config.hist_bins)
    files = [
        _write_csv(
            out / "histogram.csv",
            ("bin_lo", "bin_hi", "count"),
            [(b.lo, b.hi, b.count) for b in bins],
        )
    ]
    save_matrix_csv(out / "pairwise_distances.csv", result.pairwise)
    files.append(out / "pairwise_distances.csv")
    summary = {
        "diversity": result.mean,
        "ci95": result.ci95,
        "n_tasks": result.n_tasks,
        "n_pairs": result.n_pairs,
        "spec": list(spec.as_tuple()),
    }
    with open(out / "diversity.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files.append(out / "diversity.json")
    if config.dump_embeddings:
        payload = [
            {"task_id": e.task_id, "n_mc": e.n_mc, "values": e.values.tolist()}
            for e in embeddings
        ]
        with open(out / "embeddings.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.write("\n")
        files.append(out / "embeddings.json")
    if config.plots:
        plots.plot_histogram(bins, out / "histogram.png")
        files.append(out / "histogram.png")
    return files


def run_correlate(sweep_csv, out_dir=None):
    """Pearson r between the hellinger and task2vec columns of a sweep CSV.

    Returns (r, report dict); when an output directory is given the report
    is also written there as correlate.json.
    """
    rows = _read_csv_dicts(sweep_csv)
    if len(rows) < 3:
        raise InsufficientDataError(
            f"correlation needs >= 3 sweep rows, got {len(rows)}"
        )
    hell = [float(r["hellinger_div"]) for r in rows]
    t2v = [float(r["task2vec_div"]) for r in rows]
    r = pearson(hell, t2v)
    report = {"pearson_r": r, "n_rows": len(rows), "sweep_csv": str(sweep_csv)}
    if out_dir is not None:
        path = Path(out_dir) / "correlate.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return r, report


def run_experiment(config: RunConfig, out_dir) -> list:
    """Dispatch a validated config to its pipeline; returns written files."""
    if config.experiment == "div_sweep":
        return run_div_sweep(config, out_dir)
    if config.experiment == "train":
        return run_train(config, out_dir)
    if config.experiment == "eval_matrix":
        return run_eval_matrix(config, out_dir)
    if config.experiment == "repsim":
        return run_repsim(config, out_dir)
    if config.experiment == "pathology":
        return run_pathology(config, out_dir)
    if config.experiment == "histogram":
        return run_hist(config, out_dir)
    run_correlate(config.sweep_csv, out_dir)
    return [Path(out_dir) / "correlate.json"]
