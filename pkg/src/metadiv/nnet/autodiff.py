"""Reverse-mode automatic differentiation over a small primitive set.

A ``CompGraph`` is an append-only tape of ``Tensor`` nodes (matrix multiply,
broadcast add, elementwise product, transpose, relu, softmax, fused
softmax-cross-entropy, and scaling by a python float). Creation order is a
topological order, so the reverse pass simply walks node ids downward.

``grad`` supports two modes. With ``create_graph=False`` adjoints are plain
arrays and the result is a numeric gradient. With ``create_graph=True`` every
adjoint is itself recorded on the tape via the analytic backward formula of
each primitive, so the returned gradients are ``Tensor`` nodes that can be
composed further and differentiated again — this is what makes the gradient
of an unrolled inner-loop update (second-order meta-gradients) exact rather
than approximated.

Shape conventions: everything is a 2-D float64 array. Scalars are (1, 1)
matrices; biases are (1, K) rows added with broadcasting. Backward rules are
written once against a small dispatch surface (operators plus ``_transpose``)
that works on both plain arrays and Tensors, which keeps the two modes from
drifting apart.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError

__all__ = ["CompGraph", "Tensor", "relu", "softmax", "softmax_cross_entropy", "grad"]


def _as_value(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise InvalidInputError(f"tape values must be 2-D (scalars as (1,1)), got shape {arr.shape}")
    return arr


class Tensor:
    """One node of a CompGraph: a value, its parents, and a backward rule."""

    __slots__ = ("graph", "value", "parents", "backward", "op", "node_id", "needs_grad")

    # keep numpy from consuming us in mixed expressions; reflected ops run instead
    __array_ufunc__ = None

    def __init__(self, graph, value, parents, backward, op, needs_grad):
        self.graph = graph
        self.value = value
        self.parents = parents
        self.backward = backward
        self.op = op
        self.needs_grad = needs_grad
        self.node_id = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.graph is not self.graph:
                raise InvalidInputError("cannot mix tensors from different graphs")
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return _add(self, self._lift(other))

    def __radd__(self, other):
        return _add(self._lift(other), self)

    def __sub__(self, other):
        return _add(self, _scale(self._lift(other), -1.0))

    def __rsub__(self, other):
        return _add(self._lift(other), _scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return _mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return _matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return _matmul(self._lift(other), self)

    def t(self) -> "Tensor":
        return _transpose_node(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise InvalidInputError("item() requires a scalar tensor")
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape}, id={self.node_id})"


class CompGraph:
    """Append-only tape; node ids increase in creation order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, value) -> Tensor:
        """A differentiable input (gradients may be requested for it)."""
        return Tensor(self, _as_value(value), (), None, "leaf", True)

    def const(self, value) -> Tensor:
        """A non-differentiable input; the reverse pass never enters it."""
        return Tensor(self, _as_value(value), (), None, "const", False)


def _shape_of(x):
    return x.value.shape if isinstance(x, Tensor) else x.shape


def _transpose(x):
    return x.t() if isinstance(x, Tensor) else x.T


def _reduce_to(x, target_shape):
    """Sum a broadcast adjoint back to the operand's shape.

    Works in both modes because the reductions are expressed as matrix
    products with constant ones blocks.
    """
    cur = _shape_of(x)
    if cur == target_shape:
        return x
    rows, cols = cur
    if target_shape == (1, cols):
        return np.ones((1, rows)) @ x
    if target_shape == (1, 1):
        return np.ones((1, rows)) @ x @ np.ones((cols, 1))
    raise InvalidInputError(f"cannot reduce adjoint of shape {cur} to {target_shape}")


def _node(graph, value, parents, backward, op) -> Tensor:
    needs = any(p.needs_grad for p in parents)
    return Tensor(graph, value, parents, backward if needs else None, op, needs)


def _check_broadcast(sa, sb):
    ok = sa == sb or sa in ((1, sb[1]), (1, 1)) or sb in ((1, sa[1]), (1, 1))
    if not ok:
        raise InvalidInputError(f"unsupported operand shapes {sa} and {sb}")


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g, out, pa, pb):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _node(a.graph, a.value + b.value, (a, b), backward, "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g, out, pa, pb):
        return _reduce_to(g * pb, sa), _reduce_to(g * pa, sb)

    return _node(a.graph, a.value * b.value, (a, b), backward, "mul")


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g, out, pa, pb):
        return g @ _transpose(pb), _transpose(pa) @ g

    return _node(a.graph, a.value @ b.value, (a, b), backward, "matmul")


def _transpose_node(a: Tensor) -> Tensor:
    def backward(g, out, pa):
        return (_transpose(g),)

    return _node(a.graph, a.value.T.copy(), (a,), backward, "transpose")


def _scale(a: Tensor, c: float) -> Tensor:
    def backward(g, out, pa):
        return (g * c,)

    return _node(a.graph, a.value * c, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 taken as 0; the mask is a constant of the
    # forward point, which is also the exact rule for the double-backward
    # since relu'' vanishes almost everywhere
    mask = (a.value > 0.0).astype(np.float64)

    def backward(g, out, pa):
        return (g * mask,)

    return _node(a.graph, a.value * mask, (a,), backward, "relu")


def _softmax_value(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    value = _softmax_value(a.value)
    k = a.shape[1]

    def backward(g, out, pa):
        prod = out * g
        row_sums = prod @ np.ones((k, 1))
        return (prod - out * (row_sums @ np.ones((1, k))),)

    return _node(a.graph, value, (a,), backward, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of rowwise softmax against integer labels.

    Numerically stable via the log-sum-exp shift; returns a (1, 1) scalar.
    The backward rule is the analytic (softmax - onehot) / batch form; under
    ``create_graph`` the softmax is re-recorded as a tape node so the rule
    stays differentiable.
    """
    y = np.asarray(labels, dtype=np.int64).ravel()
    z = logits.value
    batch, k = z.shape
    if y.shape[0] != batch:
        raise InvalidInputError(f"labels length {y.shape[0]} != batch {batch}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise InvalidInputError("labels out of range")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    value = np.array([[np.mean(lse - z[np.arange(batch), y])]])
    probs = _softmax_value(z)
    onehot = np.zeros((batch, k))
    onehot[np.arange(batch), y] = 1.0

    def backward(g, out, plogits):
        sm = softmax(plogits) if isinstance(plogits, Tensor) else probs
        return ((sm - onehot) * g * (1.0 / batch),)

    return _node(logits.graph, value, (logits,), backward, "softmax_cross_entropy")


def grad(output: Tensor, wrt, create_graph: bool = False):
    """Gradients of a scalar tape node with respect to other tape nodes.

    ``wrt`` entries may be leaves or intermediate nodes (an unrolled inner
    loop differentiates each step's loss w.r.t. the current, already-updated
    parameters). Returns one gradient per entry, as arrays when
    ``create_graph=False`` and as Tensors (recorded on the same tape, ready
    for further differentiation) when ``create_graph=True``. Nodes the
    output does not depend on get zero gradients.
    """
    if output.value.size != 1:
        raise InvalidInputError("grad requires a scalar output")
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, Tensor) or w.graph is not output.graph:
            raise InvalidInputError("wrt entries must be tensors of the output's graph")
        if not w.needs_grad:
            raise InvalidInputError("wrt entries must be differentiable tensors, not constants")
    graph = output.graph
    nodes = graph.nodes
    wrt_ids = {w.node_id for w in wrt}
    adjoint: dict[int, object] = {}
    seed = np.ones((1, 1))
    adjoint[output.node_id] = graph.const(seed) if create_graph else seed
    # walk the tape backwards from the output; ids below output.node_id cover
    # every ancestor, and nodes appended by create_graph rules land above it.
    # consumers always have higher ids than their parents, so by the time nid
    # is reached its adjoint is complete and may be kept for collection.
    for nid in range(output.node_id, -1, -1):
        g = adjoint.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if node.backward is None:
            if node.op not in ("leaf", "const") and nid not in wrt_ids:
                del adjoint[nid]
            continue
        if nid not in wrt_ids:
            del adjoint[nid]
        if create_graph:
            out_ref, parent_refs = node, node.parents
        else:
            out_ref, parent_refs = node.value, tuple(p.value for p in node.parents)
        contribs = node.backward(g, out_ref, *parent_refs)
        for parent, contrib in zip(node.parents, contribs):
            if contrib is None or not parent.needs_grad:
                continue
            existing = adjoint.get(parent.node_id)
            adjoint[parent.node_id] = contrib if existing is None else existing + contrib
    results = []
    for w in wrt:
        g = adjoint.get(w.node_id)
        if g is None:
            g = graph.const(np.zeros(w.shape)) if create_graph else np.zeros(w.shape)
        results.append(g)
    return results
