"""Fair-comparison trainers and the meta-test evaluation matrix.

MAML (second-order by default) and union supervised learning (USL) share
the architecture, the Adam hyperparameters, and the convergence check, so
accuracy differences are attributable to the training principle rather than
the setup. Evaluation fixes one task set per (split, seed) and reuses it
for every (initialization, adaptation) cell, which makes the paired
comparisons the acceptance analysis needs meaningful.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import CcaOvershootError, InvalidInputError, TrainingDivergedError
from .gaussbench import FewShotTask, GaussianBenchmark, sample_task
from .nnet import (
    MlpConfig,
    ParameterSet,
    accuracy,
    features,
    fit_logistic_head,
    forward,
    init_mlp,
    inner_adapted_params,
    init_adam,
    adam_step,
    loss_and_grad,
    replace_head,
)
from .numerics import RngStream, mean_ci95
from .repsim import (
    SafetyPolicy,
    DEFAULT_POLICY,
    lincka_distance,
    opd_distance,
    pwcca_distance,
    safety_risky,
    svcca_distance,
)

__all__ = [
    "MamlConfig",
    "AdaptationMethod",
    "EvalResult",
    "CurvePoint",
    "LayerDistanceRow",
    "maml_train",
    "usl_train",
    "adapt",
    "meta_test",
    "eval_matrix",
    "layerwise_model_distance",
    "plateau_converged",
    "save_curve_csv",
    "save_eval_csv",
]

log = logging.getLogger(__name__)

METRIC_FUNCS = {
    "svcca": svcca_distance,
    "pwcca": pwcca_distance,
    "lincka": lincka_distance,
    "opd": opd_distance,
}


@dataclass(frozen=True)
class MamlConfig:
    """Second-order MAML training schedule and inner-loop settings."""

    inner_lr: float = 0.1
    inner_steps: int = 5
    meta_batch: int = 100
    iterations: int = 14000
    outer_lr: float = 1e-3
    second_order: bool = True
    eval_interval: int = 500
    n_val_tasks: int = 100

    def __post_init__(self):
        if self.inner_steps < 1:
            raise InvalidInputError("inner_steps must be >= 1 for training")
        if self.meta_batch < 1 or self.iterations < 0:
            raise InvalidInputError("meta_batch >= 1 and iterations >= 0 required")


@dataclass(frozen=True)
class AdaptationMethod:
    """What happens to a trained model on a task's support set at test time."""

    kind: str
    steps: int | None = None
    c_reg: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "maml_k", "head_lr"):
            raise InvalidInputError(f"unknown adaptation kind {self.kind!r}")
        if self.kind == "maml_k" and (self.steps is None or self.steps < 1):
            raise InvalidInputError("maml_k needs steps >= 1")

    @classmethod
    def none(cls) -> "AdaptationMethod":
        return cls(kind="none")

    @classmethod
    def maml(cls, steps: int) -> "AdaptationMethod":
        return cls(kind="maml_k", steps=int(steps))

    @classmethod
    def head_lr(cls, c_reg: float = 1.0) -> "AdaptationMethod":
        return cls(kind="head_lr", c_reg=float(c_reg))

    @property
    def label(self) -> str:
        if self.kind == "maml_k":
            return f"maml_{self.steps}"
        return self.kind


@dataclass(frozen=True)
class EvalResult:
    init_label: str
    adaptation: AdaptationMethod
    accuracy: float
    ci95: float
    n_tasks: int


@dataclass(frozen=True)
class CurvePoint:
    """One learning-curve record; loss or accuracy may be absent (None)."""

    step: int
    split: str
    loss: float | None
    accuracy: float | None


@dataclass(frozen=True)
class LayerDistanceRow:
    layer: str
    metric: str
    mean: float
    ci95: float
    n_tasks: int
    risky: bool


def _sample_tasks(classes, count, rng, n_way, k_support, k_query):
    return [
        sample_task(classes, n_way, k_support, k_query, rng.derive(i))
        for i in range(count)
    ]


def _check_finite_grads(loss, grads: ParameterSet, iteration, last_params):
    if not np.isfinite(loss) or not grads.is_finite():
        raise TrainingDivergedError(
            f"non-finite loss/gradient at iteration {iteration}",
            last_params=last_params,
            iteration=iteration,
        )


def maml_train(
    bench: GaussianBenchmark,
    model_cfg: MlpConfig,
    maml_cfg: MamlConfig,
    rng: RngStream,
    n_way: int = 5,
    k_support: int = 10,
    k_query: int = 15,
):
    """Episodic outer loop: per iteration, adapt on each sampled task's
    support via the unrolled inner loop and take one Adam step on the mean
    query loss (differentiated through the inner steps when second order).

    Returns (params, curve). Meta-val accuracy on a fixed task set is logged
    every ``eval_interval`` iterations; a non-finite loss or gradient raises
    ``TrainingDivergedError`` carrying the last finite parameters.
    """
    train_classes = bench.split("meta_train")
    params = init_mlp(model_cfg, rng.derive(0))
    state = init_adam(params, lr=maml_cfg.outer_lr)
    task_rng = rng.derive(1)
    val_tasks = _sample_tasks(
        bench.split("meta_val"), maml_cfg.n_val_tasks, rng.derive(2), n_way, k_support, k_query
    )
    val_method = AdaptationMethod.maml(maml_cfg.inner_steps)
    curve: list[CurvePoint] = []
    task_counter = 0
    for it in range(maml_cfg.iterations):
        sum_w = [np.zeros_like(w) for w in params.weights]
        sum_b = [np.zeros_like(b) for b in params.biases]
        loss_sum = 0.0
        acc_sum = 0.0
        for _ in range(maml_cfg.meta_batch):
            task = sample_task(
                train_classes, n_way, k_support, k_query, task_rng.derive(task_counter)
            )
            task_counter += 1
            adapted = inner_adapted_params(
                params,
                task.support_x,
                task.support_y,
                maml_cfg.inner_steps,
                maml_cfg.inner_lr,
                second_order=maml_cfg.second_order,
            )
            qloss, grads = adapted.meta_grad(task.query_x, task.query_y)
            _check_finite_grads(qloss, grads, it, params)
            loss_sum += qloss
            acc_sum += accuracy(
                adapted.values(check_finite=False), task.query_x, task.query_y
            )
            for i, g in enumerate(grads.weights):
                sum_w[i] += g
            for i, g in enumerate(grads.biases):
                sum_b[i] += g
        scale = 1.0 / maml_cfg.meta_batch
        mean_grads = ParameterSet(
            [g * scale for g in sum_w], [g * scale for g in sum_b], check_finite=False
        )
        params, state = adam_step(state, params, mean_grads)
        curve.append(
            CurvePoint(it + 1, "meta_train", loss_sum * scale, acc_sum * scale)
        )
        if (it + 1) % maml_cfg.eval_interval == 0 or (it + 1) == maml_cfg.iterations:
            acc, _ = _eval_on_tasks(params, val_tasks, val_method, inner_lr=maml_cfg.inner_lr)
            curve.append(CurvePoint(it + 1, "meta_val", None, acc))
    return params, curve


def usl_train(
    bench: GaussianBenchmark,
    model_cfg: MlpConfig,
    rng: RngStream,
    epochs: int = 100,
    batch_size: int = 100,
    eval_interval: int = 5,
    n_val_tasks: int = 100,
    outer_lr: float = 1e-3,
    n_way: int = 5,
    k_support: int = 10,
    k_query: int = 15,
):
    """Supervised training on the union of all meta-train classes.

    The head is as wide as the meta-train class count (one label per class,
    ordered by class id); everything else matches the MAML setup. Meta-val
    transfer accuracy (features + refit logistic head) is logged every
    ``eval_interval`` epochs as the convergence signal comparable to MAML's.
    """
    train_classes = bench.split("meta_train")
    union_cfg = replace(model_cfg, output_size=len(train_classes))
    x_all = np.concatenate([c.points for c in train_classes]).reshape(-1, 1)
    y_all = np.repeat(np.arange(len(train_classes), dtype=np.int64), len(train_classes[0].points))
    params = init_mlp(union_cfg, rng.derive(0))
    state = init_adam(params, lr=outer_lr)
    shuffle_rng = rng.derive(1)
    val_tasks = _sample_tasks(
        bench.split("meta_val"), n_val_tasks, rng.derive(2), n_way, k_support, k_query
    )
    val_method = AdaptationMethod.head_lr()
    curve: list[CurvePoint] = []
    n = x_all.shape[0]
    for epoch in range(epochs):
        perm = shuffle_rng.generator.permutation(n)
        loss_sum = 0.0
        acc_sum = 0.0
        n_batches = 0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            bx, by = x_all[idx], y_all[idx]
            loss, grads = loss_and_grad(params, bx, by)
            _check_finite_grads(loss, grads, epoch, params)
            acc_sum += accuracy(params, bx, by)
            loss_sum += loss
            params, state = adam_step(state, params, grads)
            n_batches += 1
        curve.append(CurvePoint(epoch + 1, "train", loss_sum / n_batches, acc_sum / n_batches))
        if (epoch + 1) % eval_interval == 0 or (epoch + 1) == epochs:
            acc, _ = _eval_on_tasks(params, val_tasks, val_method)
            curve.append(CurvePoint(epoch + 1, "meta_val", None, acc))
    return params, curve


def _fresh_head(params: ParameterSet, n_way: int, rng: RngStream) -> ParameterSet:
    fan_in = params.weights[-1].shape[0]
    w = rng.generator.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, n_way))
    return replace_head(params, w, np.zeros(n_way))


def adapt(
    params: ParameterSet,
    support_x,
    support_y,
    method: AdaptationMethod,
    head_init=None,
    rng: RngStream | None = None,
    inner_lr: float = 0.1,
) -> ParameterSet:
    """Apply one adaptation method to a model on a task's support set.

    ``none`` keeps the parameters (substituting a fresh random head when the
    head width does not match the task, which needs an rng). ``maml_k`` runs
    k plain SGD steps on all layers; on a width mismatch a head_init of the
    right width must be supplied (the wide head is discarded). ``head_lr``
    refits the head by logistic regression on the support features.
    """
    y = np.asarray(support_y, dtype=np.int64).ravel()
    n_way = int(y.max()) + 1
    if method.kind == "none":
        if params.head_width() == n_way:
            return params
        if rng is None:
            raise InvalidInputError("head width mismatch under 'none' needs an rng for a fresh head")
        return _fresh_head(params, n_way, rng)
    if method.kind == "maml_k":
        current = params
        if params.head_width() != n_way:
            if head_init is None:
                raise InvalidInputError(
                    f"maml_k on a {params.head_width()}-way head needs a {n_way}-way head_init"
                )
            current = replace_head(params, head_init[0], head_init[1])
        # Plain SGD has no step-size safeguard; at extreme input scales the
        # updates can blow past float64.  Keep the last iterate whose support
        # logits are still finite so the evaluation stays defined (the
        # diverged cell then scores whatever that iterate earns).
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(method.steps):
                _, grads = loss_and_grad(current, support_x, y)
                new_w = [w - inner_lr * g for w, g in zip(current.weights, grads.weights)]
                new_b = [b - inner_lr * g for b, g in zip(current.biases, grads.biases)]
                if not all(np.isfinite(a).all() for a in new_w + new_b):
                    break
                candidate = ParameterSet(new_w, new_b)
                try:
                    forward(candidate, support_x)
                except InvalidInputError:
                    break
                current = candidate
        return current
    # head_lr: freeze features, refit the final layer convexly
    feats = features(params, support_x)
    w, b = fit_logistic_head(feats, y, c_reg=method.c_reg)
    return replace_head(params, w, b)


def _eval_on_tasks(
    params: ParameterSet,
    tasks: list[FewShotTask],
    method: AdaptationMethod,
    head_init=None,
    rng: RngStream | None = None,
    inner_lr: float = 0.1,
):
    accs = []
    for i, task in enumerate(tasks):
        task_rng = rng.derive(i) if rng is not None else None
        adapted = adapt(
            params,
            task.support_x,
            task.support_y,
            method,
            head_init=head_init,
            rng=task_rng,
            inner_lr=inner_lr,
        )
        # A diverged adaptation can leave weights whose query logits overflow
        # even though the support pass stayed finite; such a model has no
        # valid predictions, so it scores zero on that task.
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                accs.append(accuracy(adapted, task.query_x, task.query_y))
            except InvalidInputError:
                accs.append(0.0)
    return mean_ci95(accs)


def meta_test(
    params: ParameterSet,
    bench: GaussianBenchmark,
    split: str,
    method: AdaptationMethod,
    n_tasks: int,
    rng: RngStream,
    head_init=None,
    init_label: str = "model",
    n_way: int = 5,
    k_support: int = 10,
    k_query: int = 15,
    inner_lr: float = 0.1,
) -> EvalResult:
    """Accuracy over a task set fixed by the evaluation stream: the same
    (split, rng) always yields the same tasks, so different methods can be
    compared on identical episodes."""
    if n_tasks < 2:
        raise InvalidInputError("need n_tasks >= 2")
    tasks = _sample_tasks(bench.split(split), n_tasks, rng.derive(0), n_way, k_support, k_query)
    acc, ci = _eval_on_tasks(
        params, tasks, method, head_init=head_init, rng=rng.derive(1), inner_lr=inner_lr
    )
    return EvalResult(init_label, method, acc, ci, n_tasks)


def eval_matrix(
    inits: dict,
    methods: list,
    bench: GaussianBenchmark,
    n_tasks: int,
    rng: RngStream,
    split: str = "meta_test",
    n_way: int = 5,
    k_support: int = 10,
    k_query: int = 15,
    inner_lr: float = 0.1,
) -> list[EvalResult]:
    """Every (init, method) cell evaluated on one shared task set, in
    deterministic order (init insertion order, then method order).

    When a wide-headed (union-trained) model meets ``maml_k``, the head of
    the init labeled ``maml`` is borrowed as head_init; absent that, a zero
    head is used and logged.
    """
    if not inits or not methods:
        raise InvalidInputError("need at least one init and one method")
    tasks = _sample_tasks(bench.split(split), n_tasks, rng.derive(0), n_way, k_support, k_query)
    maml_params = inits.get("maml")
    rows = []
    for label, params in inits.items():
        for method in methods:
            head_init = None
            if method.kind == "maml_k" and params.head_width() != n_way:
                if maml_params is not None and maml_params.head_width() == n_way:
                    head_init = (maml_params.weights[-1], maml_params.biases[-1])
                else:
                    head_init = (
                        np.zeros((params.weights[-1].shape[0], n_way)),
                        np.zeros(n_way),
                    )
                    log.info(
                        "eval_matrix: zero head used for init %r under %s",
                        label,
                        method.label,
                    )
            acc, ci = _eval_on_tasks(
                params, tasks, method, head_init=head_init, rng=rng.derive(1), inner_lr=inner_lr
            )
            rows.append(EvalResult(label, method, acc, ci, len(tasks)))
    return rows


def layerwise_model_distance(
    params_a: ParameterSet,
    params_b: ParameterSet,
    adapt_a: AdaptationMethod,
    adapt_b: AdaptationMethod,
    tasks: list,
    metric="svcca",
    policy: SafetyPolicy = DEFAULT_POLICY,
    head_init_a=None,
    head_init_b=None,
    rng: RngStream | None = None,
    inner_lr: float = 0.1,
) -> list[LayerDistanceRow]:
    """Per-layer representation distances between two adapted models.

    Both models adapt on each task's support, run forward on its query
    batch, and their layer traces are compared metric by metric (``metric``
    is a name or a sequence of names); rows aggregate across tasks with mean
    and 95% CI. Rows are flagged risky when the query batch is under the
    safety margin for that layer's width.
    """
    if params_a.layer_sizes[:-1] != params_b.layer_sizes[:-1]:
        raise InvalidInputError("models must share the feature architecture")
    if len(tasks) < 2:
        raise InvalidInputError("need at least 2 tasks for CIs")
    metrics = (metric,) if isinstance(metric, str) else tuple(metric)
    for m in metrics:
        if m not in METRIC_FUNCS:
            raise InvalidInputError(f"unknown metric {m!r}")
    per_cell: dict = {}
    layer_names: list = []
    layer_widths: dict = {}
    n_examples = None
    for t_idx, task in enumerate(tasks):
        rng_a = rng.derive(2 * t_idx) if rng is not None else None
        rng_b = rng.derive(2 * t_idx + 1) if rng is not None else None
        pa = adapt(params_a, task.support_x, task.support_y, adapt_a,
                   head_init=head_init_a, rng=rng_a, inner_lr=inner_lr)
        pb = adapt(params_b, task.support_x, task.support_y, adapt_b,
                   head_init=head_init_b, rng=rng_b, inner_lr=inner_lr)
        _, trace_a = forward(pa, task.query_x, source_model="a")
        _, trace_b = forward(pb, task.query_x, source_model="b")
        n_examples = task.query_x.shape[0]
        for la, lb in zip(trace_a, trace_b):
            if la.layer_name not in layer_widths:
                layer_names.append(la.layer_name)
                layer_widths[la.layer_name] = max(la.d, lb.d)
            for m in metrics:
                if m == "opd" and la.matrix.shape != lb.matrix.shape:
                    continue
                # A degenerate trace (e.g. an all-zero layer after a
                # diverged adaptation) makes the metric undefined for this
                # task only; drop the task from this cell and keep going.
                try:
                    value = METRIC_FUNCS[m](la, lb, policy=policy)
                except (InvalidInputError, CcaOvershootError) as exc:
                    log.warning(
                        "task %d: %s undefined at %s (%s); dropped",
                        t_idx, m, la.layer_name, exc,
                    )
                    continue
                per_cell.setdefault((la.layer_name, m), []).append(value)
    rows = []
    for layer in layer_names:
        for m in metrics:
            values = per_cell.get((layer, m))
            if not values or len(values) < 2:
                if values:
                    log.warning(
                        "layer %s metric %s: only %d defined task(s); row dropped",
                        layer, m, len(values),
                    )
                continue
            mean, ci = mean_ci95(values)
            rows.append(
                LayerDistanceRow(
                    layer,
                    m,
                    mean,
                    ci,
                    len(values),
                    safety_risky(n_examples, layer_widths[layer], policy),
                )
            )
    return rows


def plateau_converged(
    val_accuracies, window_frac: float = 0.2, min_improve: float = 0.002
) -> bool:
    """Shared convergence check: no improvement beyond ``min_improve`` over
    the last ``window_frac`` of the logged validation points."""
    vals = [float(v) for v in val_accuracies]
    if len(vals) < 2:
        return False
    window = max(2, int(np.ceil(window_frac * len(vals))))
    tail = vals[-window:]
    return (max(tail) - tail[0]) <= min_improve


def curve_val_accuracies(curve) -> list:
    return [p.accuracy for p in curve if p.split == "meta_val" and p.accuracy is not None]


def save_curve_csv(path, curve) -> None:
    """Learning-curve CSV: iteration_or_epoch, split, loss, accuracy (empty
    cells where a quantity was not logged)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration_or_epoch,split,loss,accuracy\n")
        for p in curve:
            loss = "" if p.loss is None else repr(float(p.loss))
            acc = "" if p.accuracy is None else repr(float(p.accuracy))
            fh.write(f"{p.step},{p.split},{loss},{acc}\n")


def save_eval_csv(path, rows) -> None:
    """Evaluation-matrix CSV: init, adaptation, accuracy, ci95, n_tasks."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("init,adaptation,accuracy,ci95,n_tasks\n")
        for r in rows:
            fh.write(
                f"{r.init_label},{r.adaptation.label},{repr(r.accuracy)},"
                f"{repr(r.ci95)},{r.n_tasks}\n"
            )
