"""Feature-distance metrics between layer activation matrices.

Implements SVCCA, PWCCA, linear CKA, and the orthogonal Procrustes distance,
together with the supporting rules used around them in practice: 0.99
singular-value truncation, projection weighting, CNN reshaping conventions,
row subsampling, and the examples-per-feature safety margin.

All metrics center columns first and return a distance in [0, 1] where 0
means the representations match. When a pair violates the safety margin
(examples < safety_factor * features) the value is still computed but a
``SafetyMarginWarning`` is emitted; correlation-based metrics are known to
report spuriously high similarity in that regime (see ``pathology_curve``).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CcaOvershootError, InvalidInputError, SafetyMarginWarning
from .numerics import (
    RngStream,
    as_matrix,
    gram_schmidt,
    inv_sqrt_spd,
    load_matrix_csv,
    nuclear_norm,
    save_matrix_csv,
    svd,
)

__all__ = [
    "RESHAPE_MODES",
    "LayerMatrix",
    "CcaResult",
    "SafetyPolicy",
    "safety_margin_ok",
    "safety_risky",
    "truncate_svd_99",
    "cca",
    "svcca_distance",
    "pwcca_distance",
    "lincka_distance",
    "opd_distance",
    "conv_layer_matrix",
    "PathologyCell",
    "pathology_curve",
    "save_layer_matrix",
    "load_layer_matrix",
]

RESHAPE_MODES = ("plain", "channels_as_features", "activations_as_features")


@dataclass(frozen=True)
class LayerMatrix:
    """An N-examples x D-features activation matrix tagged with its origin."""

    matrix: np.ndarray
    layer_name: str = "layer"
    source_model: str = "unknown"
    reshape_mode: str = "plain"

    def __post_init__(self):
        m = as_matrix(self.matrix, name=f"layer matrix '{self.layer_name}'")
        if m.shape[0] < 1 or m.shape[1] < 1:
            raise InvalidInputError("layer matrix must have N >= 1 and D >= 1")
        if self.reshape_mode not in RESHAPE_MODES:
            raise InvalidInputError(f"unknown reshape_mode {self.reshape_mode!r}")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class CcaResult:
    """Canonical correlations and directions for a pair of centered matrices.

    ``correlations`` are clipped into [0, 1] and sorted descending with
    C = min(D1, D2) entries. ``cca_vectors_left`` holds the orthonormalized
    left canonical vectors (the per-example images of the left directions);
    PWCCA's projection weights are inner products against these columns.
    """

    correlations: np.ndarray
    directions_left: np.ndarray
    directions_right: np.ndarray
    cca_vectors_left: np.ndarray


@dataclass(frozen=True)
class SafetyPolicy:
    """Examples-per-feature margin rules for the metrics.

    ``safety_factor`` is the factor s in the margin inequality; a comparison
    is flagged risky when n_examples < s * n_features. ``subsample_multiplier``
    sets the row cap (multiplier * n_features) used when flattening CNN
    activations in channels mode.
    """

    safety_factor: float = 10.0
    subsample_multiplier: int = 20

    def __post_init__(self):
        if self.safety_factor < 1.0:
            raise InvalidInputError("safety_factor must be >= 1")
        if self.subsample_multiplier < 1:
            raise InvalidInputError("subsample_multiplier must be >= 1")


DEFAULT_POLICY = SafetyPolicy()


def _coerce(l, name: str) -> np.ndarray:
    if isinstance(l, LayerMatrix):
        return l.matrix
    return as_matrix(l, name=name)


def _center(m: np.ndarray) -> np.ndarray:
    return m - m.mean(axis=0, keepdims=True)


def safety_margin_ok(n_examples: int, n_features: int, policy: SafetyPolicy = DEFAULT_POLICY) -> bool:
    """Margin predicate ``n_features <= s * n_examples``.

    Note this much weaker inequality is satisfiable in regimes that are still
    unreliable; use :func:`safety_risky` for the strict rule actually used to
    flag comparisons.
    """
    if n_examples < 1 or n_features < 1:
        raise InvalidInputError("counts must be >= 1")
    return n_features <= policy.safety_factor * n_examples


def safety_risky(n_examples: int, n_features: int, policy: SafetyPolicy = DEFAULT_POLICY) -> bool:
    """True when the strict margin (examples >= s * features) is violated."""
    if n_examples < 1 or n_features < 1:
        raise InvalidInputError("counts must be >= 1")
    return n_examples < policy.safety_factor * n_features


def _warn_if_risky(n: int, d1: int, d2: int, policy: SafetyPolicy, metric: str) -> None:
    d = max(d1, d2)
    if safety_risky(n, d, policy):
        warnings.warn(
            f"{metric}: {n} examples for {d} features is below the "
            f"{policy.safety_factor:g}x safety margin; value may be unreliable",
            SafetyMarginWarning,
            stacklevel=3,
        )


def _truncation_count(singular_values: np.ndarray, energy: float = 0.99) -> int:
    """Smallest k with sum of the top-k absolute singular values >= energy * total."""
    s = np.abs(np.asarray(singular_values, dtype=np.float64))
    total = float(s.sum())
    if total == 0.0:
        return 1
    return int(np.searchsorted(np.cumsum(s), energy * total, side="left")) + 1


def truncate_svd_99(l: LayerMatrix, energy: float = 0.99) -> LayerMatrix:
    """Project a layer matrix onto its top right-singular directions.

    Keeps the smallest D' whose absolute singular values sum to at least
    ``energy`` (default 0.99) of the total, and returns L @ V[:, :D'] with the
    origin metadata carried over.
    """
    m = _coerce(l, "layer matrix")
    res = svd(m)
    keep = min(_truncation_count(res.singular_values, energy), m.shape[1])
    projected = m @ res.Vt[:keep].T
    if isinstance(l, LayerMatrix):
        return LayerMatrix(projected, l.layer_name, l.source_model, l.reshape_mode)
    return LayerMatrix(projected)


def cca(l1, l2, floor: float = 1e-10) -> CcaResult:
    """Canonical correlation analysis of two layer matrices.

    Columns are centered internally; correlations are the singular values of
    ``S11^{-1/2} S12 S22^{-1/2}`` built from raw cross products of the
    centered matrices (the sample-size factor cancels). Covariance eigenvalues
    below ``floor`` are clamped, which keeps rank-deficient inputs usable.

    Raises
    ------
    InvalidInputError
        If example counts differ.
    CcaOvershootError
        If any correlation exceeds 1 + 1e-6 (values in (1, 1+1e-6] are
        clipped silently as rounding).
    """
    x = _center(_coerce(l1, "l1"))
    y = _center(_coerce(l2, "l2"))
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    s11 = x.T @ x
    s22 = y.T @ y
    s12 = x.T @ y
    w1 = inv_sqrt_spd(s11, eig_floor=floor)
    w2 = inv_sqrt_spd(s22, eig_floor=floor)
    res = svd(w1 @ s12 @ w2)
    rho = res.singular_values
    overshoot = float(rho.max(initial=0.0))
    if overshoot > 1.0 + 1e-6:
        raise CcaOvershootError(
            f"canonical correlation {overshoot:.6e} exceeds 1 + 1e-6; "
            "covariance inversion is ill-conditioned"
        )
    rho = np.clip(rho, 0.0, 1.0)
    directions_left = w1 @ res.U
    directions_right = w2 @ res.Vt.T
    vectors_left = gram_schmidt(x @ directions_left)
    return CcaResult(rho, directions_left, directions_right, vectors_left)


def _check_nonzero(m: np.ndarray, which: str) -> None:
    if not np.any(m):
        raise InvalidInputError(f"{which} is all zero; distance undefined")


def svcca_distance(l1, l2, policy: SafetyPolicy = DEFAULT_POLICY, floor: float = 1e-10) -> float:
    """SVCCA distance: 1 minus the mean canonical correlation after both
    sides are truncated to 0.99 singular-value energy.

    Truncation acts on the raw matrices; centering happens inside the CCA
    step, matching the reference pipeline order.
    """
    x = _coerce(l1, "l1")
    y = _coerce(l2, "l2")
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    _check_nonzero(x, "l1")
    _check_nonzero(y, "l2")
    _warn_if_risky(x.shape[0], x.shape[1], y.shape[1], policy, "svcca")
    xt = truncate_svd_99(LayerMatrix(x))
    yt = truncate_svd_99(LayerMatrix(y))
    rho = cca(xt, yt, floor=floor).correlations
    return float(np.clip(1.0 - rho.mean(), 0.0, 1.0))


def pwcca_distance(
    l1,
    l2,
    weight_side: str = "first",
    policy: SafetyPolicy = DEFAULT_POLICY,
    floor: float = 1e-10,
) -> float:
    """Projection-weighted CCA distance.

    CCA vectors of the weighting side are orthonormalized and each direction c
    receives weight ``sum_j |<x_c, z_j>|`` over all feature columns z_j of
    that side, normalized to sum 1; the distance is 1 minus the weighted mean
    correlation. ``weight_side`` is ``first`` (default), ``second``, or
    ``fewer_truncated`` (the side losing fewer directions to the 0.99
    truncation rule; ties go to the first). The metric is asymmetric in
    general; report both directions where that matters.
    """
    x = _coerce(l1, "l1")
    y = _coerce(l2, "l2")
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    _check_nonzero(x, "l1")
    _check_nonzero(y, "l2")
    if weight_side not in ("first", "second", "fewer_truncated"):
        raise InvalidInputError(f"unknown weight_side {weight_side!r}")
    _warn_if_risky(x.shape[0], x.shape[1], y.shape[1], policy, "pwcca")
    xc = _center(x)
    yc = _center(y)
    if weight_side == "fewer_truncated":
        removed_x = x.shape[1] - _truncation_count(svd(x).singular_values)
        removed_y = y.shape[1] - _truncation_count(svd(y).singular_values)
        weight_side = "first" if removed_x <= removed_y else "second"
    if weight_side == "first":
        res = cca(LayerMatrix(xc), LayerMatrix(yc), floor=floor)
        z = xc
    else:
        res = cca(LayerMatrix(yc), LayerMatrix(xc), floor=floor)
        z = yc
    q = res.cca_vectors_left
    raw = np.abs(q.T @ z).sum(axis=1)
    total = float(raw.sum())
    if total == 0.0:
        raise InvalidInputError("projection weights degenerate (all zero)")
    alpha = raw / total
    rho = res.correlations[: alpha.size]
    return float(np.clip(1.0 - float(alpha @ rho), 0.0, 1.0))


def lincka_distance(l1, l2, policy: SafetyPolicy = DEFAULT_POLICY) -> float:
    """Linear centered kernel alignment distance:
    ``1 - |X'Y|_F^2 / (|X'X|_F * |Y'Y|_F)`` on centered matrices."""
    x = _coerce(l1, "l1")
    y = _coerce(l2, "l2")
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    _warn_if_risky(x.shape[0], x.shape[1], y.shape[1], policy, "lincka")
    xc = _center(x)
    yc = _center(y)
    cross = float(np.linalg.norm(xc.T @ yc) ** 2)
    denom = float(np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc))
    if denom == 0.0:
        raise InvalidInputError("zero-variance layer matrix; CKA undefined")
    return float(np.clip(1.0 - cross / denom, 0.0, 1.0))


def opd_distance(l1, l2, policy: SafetyPolicy = DEFAULT_POLICY) -> float:
    """Orthogonal Procrustes distance: both matrices are centered and scaled
    to unit Frobenius norm, then ``1 - nuclear_norm(X'Y)``. Equals half the
    minimal squared Frobenius misfit over orthogonal alignments."""
    x = _coerce(l1, "l1")
    y = _coerce(l2, "l2")
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {y.shape} (OPD needs same N and D)")
    _warn_if_risky(x.shape[0], x.shape[1], y.shape[1], policy, "opd")
    xc = _center(x)
    yc = _center(y)
    nx = float(np.linalg.norm(xc))
    ny = float(np.linalg.norm(yc))
    if nx == 0.0 or ny == 0.0:
        raise InvalidInputError("zero-variance layer matrix; OPD undefined")
    return float(np.clip(1.0 - nuclear_norm((xc / nx).T @ (yc / ny)), 0.0, 1.0))


def conv_layer_matrix(
    activations,
    mode: str,
    policy: SafetyPolicy = DEFAULT_POLICY,
    rng: RngStream | None = None,
    layer_name: str = "conv",
    source_model: str = "unknown",
) -> LayerMatrix:
    """Flatten a 4-index CNN activation tensor (M, C, H, W) to a layer matrix.

    ``channels_as_features`` treats every spatial position of every example as
    a row ([M*H*W, C]); when that exceeds ``subsample_multiplier * C`` rows,
    rows are subsampled uniformly without replacement down to exactly the cap
    (an ``rng`` is then required). ``activations_as_features`` reshapes to
    [M, C*H*W] with no subsampling.
    """
    arr = np.asarray(activations, dtype=np.float64)
    if arr.ndim != 4:
        raise InvalidInputError(f"expected a 4-index tensor (M, C, H, W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("activations contain non-finite entries")
    m_count, channels = arr.shape[0], arr.shape[1]
    if mode == "channels_as_features":
        flat = arr.transpose(0, 2, 3, 1).reshape(-1, channels)
        cap = policy.subsample_multiplier * channels
        if flat.shape[0] > cap:
            if rng is None:
                raise InvalidInputError("subsampling required but no rng provided")
            idx = rng.generator.choice(flat.shape[0], size=cap, replace=False)
            flat = flat[np.sort(idx)]
        return LayerMatrix(flat, layer_name, source_model, mode)
    if mode == "activations_as_features":
        return LayerMatrix(arr.reshape(m_count, -1), layer_name, source_model, mode)
    raise InvalidInputError(f"mode must be channels_as_features or activations_as_features, got {mode!r}")


@dataclass(frozen=True)
class PathologyCell:
    """Mean SVCCA similarity of independent Gaussian matrices at one (D, N)."""

    n_features: int
    n_examples: int
    similarity: float
    seeds: int = field(default=10, compare=False)


def pathology_curve(
    dim_grid,
    n_points_grid,
    rng: RngStream,
    n_seeds: int = 10,
) -> list[PathologyCell]:
    """SVCCA similarity between independent standard-normal matrices over a
    (feature dim x example count) grid, averaged over seeds.

    Independent matrices have no true similarity, so any similarity reported
    here is metric pathology; it grows as features approach example counts.
    """
    dims = [int(d) for d in dim_grid]
    counts = [int(n) for n in n_points_grid]
    if not dims or not counts:
        raise InvalidInputError("grids must be nonempty")
    if n_seeds < 10:
        raise InvalidInputError("pathology cells average over at least 10 seeds")
    cells = []
    cell_index = 0
    for d in dims:
        for n in counts:
            sims = np.empty(n_seeds)
            for s in range(n_seeds):
                gen = rng.derive(cell_index).derive(s).generator
                x = gen.standard_normal((n, d))
                y = gen.standard_normal((n, d))
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", SafetyMarginWarning)
                    sims[s] = 1.0 - svcca_distance(x, y)
            cells.append(PathologyCell(d, n, float(sims.mean()), seeds=n_seeds))
            cell_index += 1
    return cells


def save_layer_matrix(path_stem, lm: LayerMatrix) -> None:
    """Write ``<stem>.csv`` (headerless matrix) plus ``<stem>.json`` sidecar."""
    stem = str(path_stem)
    save_matrix_csv(stem + ".csv", lm.matrix)
    sidecar = {
        "layer_name": lm.layer_name,
        "source_model": lm.source_model,
        "reshape_mode": lm.reshape_mode,
        "n": lm.n,
        "d": lm.d,
    }
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_layer_matrix(path_stem) -> LayerMatrix:
    """Read a layer matrix written by :func:`save_layer_matrix`."""
    stem = str(path_stem)
    matrix = load_matrix_csv(stem + ".csv")
    with open(stem + ".json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    if sidecar.get("n") != matrix.shape[0] or sidecar.get("d") != matrix.shape[1]:
        raise InvalidInputError(
            f"sidecar shape ({sidecar.get('n')}, {sidecar.get('d')}) "
            f"does not match CSV shape {matrix.shape}"
        )
    return LayerMatrix(
        matrix,
        layer_name=sidecar.get("layer_name", "layer"),
        source_model=sidecar.get("source_model", "unknown"),
        reshape_mode=sidecar.get("reshape_mode", "plain"),
    )


def layer_distances(
    l1,
    l2,
    policy: SafetyPolicy = DEFAULT_POLICY,
) -> dict[str, float]:
    """All four distances for one pair, keyed svcca/pwcca/lincka/opd.

    PWCCA is reported in the (l1, l2) direction; its asymmetry magnitude is
    included under ``pwcca_asymmetry``. OPD is skipped (NaN) when the feature
    dimensions differ, since orthogonal alignment needs matching shapes.
    """
    x = _coerce(l1, "l1")
    y = _coerce(l2, "l2")
    out = {
        "svcca": svcca_distance(x, y, policy=policy),
        "pwcca": pwcca_distance(x, y, policy=policy),
        "lincka": lincka_distance(x, y, policy=policy),
    }
    out["pwcca_asymmetry"] = abs(
        out["pwcca"] - pwcca_distance(y, x, policy=policy)
    )
    out["opd"] = opd_distance(x, y, policy=policy) if x.shape == y.shape else float("nan")
    return out
