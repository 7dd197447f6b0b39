"""Adam with standard bias correction, functional style: a step maps
(state, params, grads) to fresh (params', state') without mutation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError
from .mlp import ParameterSet

__all__ = ["AdamState", "init_adam", "adam_step"]


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators mirroring a ParameterSet, plus the
    step counter and hyperparameters."""

    m_weights: tuple
    m_biases: tuple
    v_weights: tuple
    v_biases: tuple
    t: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m_weights=tuple(np.zeros_like(w) for w in params.weights),
        m_biases=tuple(np.zeros_like(b) for b in params.biases),
        v_weights=tuple(np.zeros_like(w) for w in params.weights),
        v_biases=tuple(np.zeros_like(b) for b in params.biases),
        t=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def _update(x, m, v, g, state: AdamState, t: int):
    m_new = state.beta1 * m + (1.0 - state.beta1) * g
    v_new = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m_new / (1.0 - state.beta1**t)
    v_hat = v_new / (1.0 - state.beta2**t)
    return x - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), m_new, v_new


def adam_step(state: AdamState, params: ParameterSet, grads: ParameterSet):
    """One bias-corrected Adam update; returns (params', state')."""
    if len(grads.weights) != len(params.weights):
        raise InvalidInputError("gradient layer count does not match parameters")
    t = state.t + 1
    new_w, new_mw, new_vw = [], [], []
    for x, m, v, g in zip(params.weights, state.m_weights, state.v_weights, grads.weights):
        if x.shape != g.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter shape {x.shape}")
        xn, mn, vn = _update(x, m, v, g, state, t)
        new_w.append(xn)
        new_mw.append(mn)
        new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for x, m, v, g in zip(params.biases, state.m_biases, state.v_biases, grads.biases):
        xn, mn, vn = _update(x, m, v, g, state, t)
        new_b.append(xn)
        new_mb.append(mn)
        new_vb.append(vn)
    next_params = ParameterSet(new_w, new_b)
    next_state = AdamState(
        m_weights=tuple(new_mw),
        m_biases=tuple(new_mb),
        v_weights=tuple(new_vw),
        v_biases=tuple(new_vb),
        t=t,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return next_params, next_state
