"""Fully connected relu network over the autodiff tape.

Two forward paths exist on purpose: ``forward`` is plain numpy for
evaluation and layer-trace extraction, and the tape-based path inside
``loss_and_grad`` / ``inner_adapted_params`` is for training, where
gradients (possibly of unrolled update steps) are needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError
from ..numerics import RngStream, as_matrix
from ..repsim import LayerMatrix
from .autodiff import CompGraph, Tensor, grad, relu, softmax_cross_entropy

__all__ = [
    "MlpConfig",
    "ParameterSet",
    "AdaptedParams",
    "init_mlp",
    "forward",
    "features",
    "accuracy",
    "loss_and_grad",
    "inner_adapted_params",
    "parameter_count",
    "feature_parameter_count",
    "replace_head",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of the network: input width, hidden widths, output width."""

    input_size: int
    hidden_sizes: tuple
    output_size: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        sizes = (self.input_size, *self.hidden_sizes, self.output_size)
        if any(int(s) < 1 for s in sizes):
            raise InvalidInputError("all layer sizes must be >= 1")
        if self.activation != "relu":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")

    @property
    def layer_sizes(self) -> tuple:
        return (self.input_size, *self.hidden_sizes, self.output_size)

    @property
    def layer_names(self) -> tuple:
        return tuple(f"hidden_{i + 1}" for i in range(len(self.hidden_sizes))) + ("head",)


class ParameterSet:
    """Immutable per-layer weight matrices and bias vectors.

    Weights are (fan_in, fan_out); biases are 1-D (fan_out,). Arrays are
    copied in and marked read-only. ``check_finite=False`` exists for
    gradient containers, which share the shape discipline but may carry
    overflowed values that the training loop wants to detect itself.
    """

    __slots__ = ("weights", "biases")

    def __init__(self, weights, biases, check_finite: bool = True):
        ws = tuple(np.array(w, dtype=np.float64, copy=True) for w in weights)
        bs = tuple(np.array(b, dtype=np.float64, copy=True).ravel() for b in biases)
        if len(ws) != len(bs) or not ws:
            raise InvalidInputError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2:
                raise InvalidInputError(f"weight {i} must be 2-D, got shape {w.shape}")
            if w.shape[1] != b.size:
                raise InvalidInputError(f"layer {i}: weight fan-out {w.shape[1]} != bias size {b.size}")
            if i + 1 < len(ws) and ws[i + 1].shape[0] != w.shape[1]:
                raise InvalidInputError(f"layer {i + 1} fan-in does not match layer {i} fan-out")
            if check_finite and not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidInputError(f"layer {i} contains non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        self.weights = ws
        self.biases = bs

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def head_width(self) -> int:
        return self.weights[-1].shape[1]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights) and all(
            np.all(np.isfinite(b)) for b in self.biases
        )


def parameter_count(params: ParameterSet) -> int:
    return sum(w.size for w in params.weights) + sum(b.size for b in params.biases)


def feature_parameter_count(params: ParameterSet) -> int:
    """Parameters of every layer except the final (head) layer."""
    return sum(w.size for w in params.weights[:-1]) + sum(b.size for b in params.biases[:-1])


def init_mlp(config: MlpConfig, rng: RngStream) -> ParameterSet:
    """He-initialized weights (stddev sqrt(2/fan_in)), zero biases."""
    gen = rng.generator
    weights = []
    biases = []
    sizes = config.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(gen.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ParameterSet(weights, biases)


def replace_head(params: ParameterSet, head_weights, head_bias) -> ParameterSet:
    """New ParameterSet sharing the feature layers with a different head."""
    hw = np.asarray(head_weights, dtype=np.float64)
    hb = np.asarray(head_bias, dtype=np.float64).ravel()
    if hw.ndim != 2 or hw.shape[0] != params.weights[-1].shape[0]:
        raise InvalidInputError(
            f"head fan-in must be {params.weights[-1].shape[0]}, got shape {hw.shape}"
        )
    return ParameterSet(params.weights[:-1] + (hw,), params.biases[:-1] + (hb,))


def forward(params: ParameterSet, x, source_model: str = "model"):
    """Numpy inference pass.

    Returns (logits, trace) where the trace lists the post-activation output
    of every hidden layer followed by the logits, each as a LayerMatrix.
    """
    h = as_matrix(x, name="input batch")
    if h.shape[1] != params.weights[0].shape[0]:
        raise InvalidInputError(
            f"input width {h.shape[1]} != model input size {params.weights[0].shape[0]}"
        )
    trace = []
    n_hidden = params.n_layers - 1
    for i in range(n_hidden):
        h = np.maximum(h @ params.weights[i] + params.biases[i], 0.0)
        trace.append(LayerMatrix(h, f"hidden_{i + 1}", source_model))
    logits = h @ params.weights[-1] + params.biases[-1]
    trace.append(LayerMatrix(logits, "head", source_model))
    return logits, trace


def features(params: ParameterSet, x) -> np.ndarray:
    """Activations of the last hidden layer (the feature extractor output)."""
    h = as_matrix(x, name="input batch")
    for i in range(params.n_layers - 1):
        h = np.maximum(h @ params.weights[i] + params.biases[i], 0.0)
    return h


def accuracy(params: ParameterSet, x, y) -> float:
    logits, _ = forward(params, x)
    predicted = np.argmax(logits, axis=1)
    return float(np.mean(predicted == np.asarray(y, dtype=np.int64).ravel()))


def _make_leaves(graph: CompGraph, params: ParameterSet):
    w_ts = [graph.leaf(w) for w in params.weights]
    b_ts = [graph.leaf(b.reshape(1, -1)) for b in params.biases]
    return w_ts, b_ts


def _graph_forward(w_ts, b_ts, x_const: Tensor) -> Tensor:
    h = x_const
    for w, b in zip(w_ts[:-1], b_ts[:-1]):
        h = relu(h @ w + b)
    return h @ w_ts[-1] + b_ts[-1]


def loss_and_grad(params: ParameterSet, x, y):
    """Mean cross-entropy and its exact gradient, ParameterSet-shaped.

    The gradient container skips the finiteness check so overflow in extreme
    regimes surfaces to the caller's divergence handling, not as a shape
    error here.
    """
    graph = CompGraph()
    w_ts, b_ts = _make_leaves(graph, params)
    logits = _graph_forward(w_ts, b_ts, graph.const(as_matrix(x, name="input batch")))
    loss = softmax_cross_entropy(logits, y)
    gs = grad(loss, w_ts + b_ts)
    n = len(w_ts)
    grads = ParameterSet(gs[:n], [g.ravel() for g in gs[n:]], check_finite=False)
    return loss.item(), grads


class AdaptedParams:
    """Inner-loop-adapted parameters, still recorded on their tape.

    ``leaf_weights``/``leaf_biases`` are the initial-parameter leaves (the
    differentiation targets for meta-gradients); ``weights``/``biases`` are
    the adapted tensors after the update steps. ``query_loss`` extends the
    same tape, so differentiating it w.r.t. the leaves yields the
    second-order meta-gradient when the inner steps were recorded with
    ``create_graph``.
    """

    __slots__ = ("graph", "leaf_weights", "leaf_biases", "weights", "biases")

    def __init__(self, graph, leaf_weights, leaf_biases, weights, biases):
        self.graph = graph
        self.leaf_weights = leaf_weights
        self.leaf_biases = leaf_biases
        self.weights = weights
        self.biases = biases

    def values(self, check_finite: bool = True) -> ParameterSet:
        return ParameterSet(
            [w.value for w in self.weights],
            [b.value.ravel() for b in self.biases],
            check_finite=check_finite,
        )

    def query_loss(self, x, y) -> Tensor:
        logits = _graph_forward(
            self.weights, self.biases, self.graph.const(as_matrix(x, name="query batch"))
        )
        return softmax_cross_entropy(logits, y)

    def meta_grad(self, x, y):
        """Query-loss gradient w.r.t. the initial parameters, as a
        (loss, ParameterSet-shaped grads) pair of plain values."""
        loss = self.query_loss(x, y)
        gs = grad(loss, self.leaf_weights + self.leaf_biases)
        n = len(self.leaf_weights)
        grads = ParameterSet(gs[:n], [g.ravel() for g in gs[n:]], check_finite=False)
        return loss.item(), grads


def inner_adapted_params(
    params: ParameterSet,
    support_x,
    support_y,
    steps: int,
    inner_lr: float,
    second_order: bool = True,
) -> AdaptedParams:
    """Unrolled inner-loop SGD on the support loss.

    theta_{j+1} = theta_j - inner_lr * grad L_support(theta_j). With
    ``second_order`` each inner gradient is recorded on the tape (its
    backward formulas become forward nodes), so outer differentiation passes
    through the updates; without it the inner gradients are detached
    constants and only the final forward contributes (first-order MAML).
    """
    if steps < 0:
        raise InvalidInputError("steps must be >= 0")
    graph = CompGraph()
    leaf_w, leaf_b = _make_leaves(graph, params)
    cur_w, cur_b = list(leaf_w), list(leaf_b)
    if steps > 0:
        sx = graph.const(as_matrix(support_x, name="support batch"))
        for _ in range(steps):
            logits = _graph_forward(cur_w, cur_b, sx)
            loss = softmax_cross_entropy(logits, support_y)
            gs = grad(loss, cur_w + cur_b, create_graph=second_order)
            n = len(cur_w)
            if second_order:
                cur_w = [w - g * inner_lr for w, g in zip(cur_w, gs[:n])]
                cur_b = [b - g * inner_lr for b, g in zip(cur_b, gs[n:])]
            else:
                cur_w = [w - (g * inner_lr) for w, g in zip(cur_w, gs[:n])]
                cur_b = [b - (g * inner_lr) for b, g in zip(cur_b, gs[n:])]
    return AdaptedParams(graph, leaf_w, leaf_b, cur_w, cur_b)


def save_checkpoint(path, params: ParameterSet, config: MlpConfig, seed: int, metadata=None) -> None:
    """One-file JSON checkpoint; floats serialize with round-trip precision."""
    names = config.layer_names
    if len(names) != params.n_layers:
        raise InvalidInputError("config layer count does not match parameters")
    payload = {
        "mlp_config": {
            "input_size": config.input_size,
            "hidden_sizes": list(config.hidden_sizes),
            "output_size": params.head_width(),
            "activation": config.activation,
        },
        "seed": int(seed),
        "layers": [
            {"name": names[i], "weights": params.weights[i].tolist(), "bias": params.biases[i].tolist()}
            for i in range(params.n_layers)
        ],
        "metadata": dict(metadata or {}),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (params, config, seed, metadata) from a checkpoint file."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    cfg = payload["mlp_config"]
    config = MlpConfig(
        input_size=int(cfg["input_size"]),
        hidden_sizes=tuple(int(h) for h in cfg["hidden_sizes"]),
        output_size=int(cfg["output_size"]),
        activation=cfg.get("activation", "relu"),
    )
    layers = payload["layers"]
    params = ParameterSet(
        [np.array(l["weights"], dtype=np.float64) for l in layers],
        [np.array(l["bias"], dtype=np.float64) for l in layers],
    )
    return params, config, int(payload["seed"]), payload.get("metadata", {})
