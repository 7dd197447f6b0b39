"""Deterministic multinomial logistic-regression head solver.

Minimizes ``0.5*|W|^2 + c_reg * sum_i crossentropy_i`` over (W, b); the
bias is unregularized, matching the usual L2-logistic convention. The
objective is convex with a unique optimum in W (b has one flat direction
from softmax shift invariance, where the gradient is identically zero), so
any deterministic solver reaching the gradient tolerance returns the same
head. We run L-BFGS with the analytic gradient, then polish with damped
Newton steps when the tolerance is not yet met.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from ..errors import ConvergenceError, InvalidInputError
from ..numerics import as_matrix

__all__ = ["fit_logistic_head"]


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _objective(theta, x_aug, onehot, d, k, c_reg):
    wb = theta.reshape(d + 1, k)
    z = x_aug @ wb
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    ce = float(np.sum(lse - z[onehot.astype(bool)]))
    w = wb[:d]
    f = 0.5 * float(np.sum(w * w)) + c_reg * ce
    p = _softmax(z)
    g_wb = c_reg * (x_aug.T @ (p - onehot))
    g_wb[:d] += w
    return f, g_wb.ravel()


def _hessian(theta, x_aug, d, k, c_reg):
    wb = theta.reshape(d + 1, k)
    p = _softmax(x_aug @ wb)
    # sum_i c_reg * (diag(p_i) - p_i p_i^T) (x) a_i a_i^T, plus ridge on W rows
    block = np.einsum("ic,icd->icd", p, np.eye(k)[None].repeat(p.shape[0], 0)) - np.einsum(
        "ic,id->icd", p, p
    )
    h = c_reg * np.einsum("ia,ib,icd->acbd", x_aug, x_aug, block).reshape(
        (d + 1) * k, (d + 1) * k
    )
    ridge = np.zeros((d + 1) * k)
    ridge[: d * k] = 1.0
    h[np.diag_indices_from(h)] += ridge
    return h


def fit_logistic_head(
    features,
    labels,
    c_reg: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 1000,
):
    """Fit an n-way logistic head on (N, D) features; returns (W (D, n), b (n,)).

    Raises
    ------
    ConvergenceError
        If the gradient norm stays above ``tol`` after L-BFGS plus the
        Newton polish; the final norm is attached.
    """
    x = as_matrix(features, name="features")
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.size != x.shape[0]:
        raise InvalidInputError(f"labels length {y.size} != feature rows {x.shape[0]}")
    if y.min(initial=0) < 0:
        raise InvalidInputError("labels must be nonnegative")
    k = int(y.max()) + 1
    if k < 2:
        raise InvalidInputError("need at least 2 classes")
    n, d = x.shape
    if n < k:
        raise InvalidInputError(f"need at least as many examples ({n}) as classes ({k})")
    if c_reg <= 0:
        raise InvalidInputError("c_reg must be > 0")
    x_aug = np.hstack([x, np.ones((n, 1))])
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    res = minimize(
        _objective,
        np.zeros((d + 1) * k),
        args=(x_aug, onehot, d, k, c_reg),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "maxfun": 10 * max_iter, "ftol": 1e-18, "gtol": 1e-12},
    )

    # softmax is invariant to adding one constant to every class bias, so we
    # pin that gauge: iterates keep mean(b) = 0 and the Newton system gets a
    # full-strength shift along the flat direction instead of a tiny ridge
    # (a tiny ridge would turn gradient noise into an unbounded step there)
    def recenter(t: np.ndarray) -> np.ndarray:
        wb = t.reshape(d + 1, k).copy()
        wb[d] -= wb[d].mean()
        return wb.ravel()

    flat = np.zeros((d + 1, k))
    flat[d, :] = 1.0 / np.sqrt(k)
    flat = flat.ravel()
    theta = recenter(res.x)
    f, g = _objective(theta, x_aug, onehot, d, k, c_reg)
    grad_norm = float(np.linalg.norm(g))
    newton_iters = 0
    # near-separable data with large feature scales gives damped Newton a
    # long linear phase before the quadratic endgame, so the cap is generous
    while grad_norm > tol and newton_iters < 200:
        h = _hessian(theta, x_aug, d, k, c_reg)
        scale = max(1.0, float(np.trace(h)) / h.shape[0])
        h_pinned = h + scale * np.outer(flat, flat)
        # fully saturated fits zero out whole bias directions; escalate a
        # diagonal shift until the system solves
        step = None
        for mu in (0.0, 1e-12, 1e-9, 1e-6, 1e-3):
            try:
                step = np.linalg.solve(
                    h_pinned + mu * scale * np.eye(h.shape[0]), -g
                )
                break
            except np.linalg.LinAlgError:
                continue
        if step is None:
            break
        slope = float(g @ step)
        if slope > 0.0:  # solver noise produced an ascent direction
            step = -g / scale
            slope = float(g @ step)
        alpha = 1.0
        moved = False
        while alpha > 1e-12:
            cand = recenter(theta + alpha * step)
            f_new, g_new = _objective(cand, x_aug, onehot, d, k, c_reg)
            # in the saturated (near-separable) valley the true decrease per
            # step falls below f's evaluation noise; there the gradient norm,
            # which is still computed accurately, decides acceptance instead
            if f_new <= f + 1e-4 * alpha * slope + 4e-16 * abs(f) or float(
                np.linalg.norm(g_new)
            ) < 0.999 * grad_norm:
                theta, f, g = cand, f_new, g_new
                moved = True
                break
            alpha *= 0.5
        if not moved:
            break
        grad_norm = float(np.linalg.norm(g))
        newton_iters += 1
    if grad_norm > tol:
        raise ConvergenceError(
            f"head solver stopped at gradient norm {grad_norm:.3e} > tol {tol:.1e}",
            grad_norm=grad_norm,
        )
    wb = theta.reshape(d + 1, k)
    return wb[:d].copy(), wb[d].copy()
