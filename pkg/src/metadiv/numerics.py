"""Shared numerical kernels, statistics helpers, and seeded random streams.

Matrices throughout the package are 2-D C-contiguous float64 numpy arrays.
``as_matrix`` is the boundary validator: every public op that takes a matrix
runs its input through it, so shape/finiteness errors surface as
``InvalidInputError`` at the call site instead of as NaNs downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InsufficientDataError,
    InvalidInputError,
    UndefinedCorrelationError,
)

__all__ = [
    "as_matrix",
    "svd",
    "SvdResult",
    "inv_sqrt_spd",
    "nuclear_norm",
    "gram_schmidt",
    "mean_ci95",
    "pearson",
    "RngStream",
    "save_matrix_csv",
    "load_matrix_csv",
]

# 95% two-sided normal quantile used by every confidence interval in the package.
Z_95 = 1.96


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``x`` to a finite 2-D float64 array.

    Raises
    ------
    InvalidInputError
        If ``x`` is not 2-D or contains NaN/inf.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``M = U @ diag(singular_values) @ Vt``.

    ``singular_values`` are sorted in non-increasing order and non-negative;
    ``U`` has shape (n, k), ``Vt`` has shape (k, d) with k = min(n, d).
    """

    U: np.ndarray
    singular_values: np.ndarray
    Vt: np.ndarray


def svd(m) -> SvdResult:
    """Thin singular value decomposition of a matrix."""
    m = as_matrix(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return SvdResult(U=u, singular_values=s, Vt=vt)


def inv_sqrt_spd(m, eig_floor: float = 1e-10) -> np.ndarray:
    """Inverse matrix square root of a symmetric positive-definite matrix.

    Eigenvalues below ``eig_floor`` are clamped to it before inversion, which
    keeps near-singular covariance matrices usable at the cost of a bounded
    bias (the clamp only fires on directions with essentially no variance).

    Raises
    ------
    InvalidInputError
        If ``m`` is not square or not symmetric to 1e-10 (absolute, relative
        to the largest entry).
    """
    m = as_matrix(m)
    n, d = m.shape
    if n != d:
        raise InvalidInputError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))))
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-10 * scale):
        raise InvalidInputError("matrix is not symmetric")
    eigvals, eigvecs = np.linalg.eigh(m)
    eigvals = np.maximum(eigvals, eig_floor)
    return (eigvecs * (1.0 / np.sqrt(eigvals))) @ eigvecs.T


def nuclear_norm(m) -> float:
    """Sum of singular values of a matrix."""
    return float(np.sum(svd(m).singular_values))


def gram_schmidt(m, tol: float = 1e-10) -> np.ndarray:
    """Orthonormalize the columns of ``m`` by modified Gram-Schmidt.

    Columns whose residual norm falls below ``tol`` (relative to the largest
    column norm of the input) are linearly dependent on earlier columns and
    are dropped, so the returned matrix has exactly as many columns as the
    retained orthonormal directions.
    """
    m = as_matrix(m)
    scale = float(np.max(np.linalg.norm(m, axis=0), initial=0.0))
    if scale == 0.0:
        return np.empty((m.shape[0], 0))
    kept = []
    for c in range(m.shape[1]):
        v = m[:, c].copy()
        for q in kept:
            v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > tol * scale:
            kept.append(v / norm)
    if not kept:
        return np.empty((m.shape[0], 0))
    return np.column_stack(kept)


def mean_ci95(values) -> tuple[float, float]:
    """Sample mean and 95% normal-approximation CI half-width.

    Half-width is ``1.96 * sd / sqrt(n)`` with the unbiased (ddof=1) standard
    deviation. Requires at least two samples.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size < 2:
        raise InsufficientDataError(f"need at least 2 samples for a CI, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("samples contain non-finite entries")
    mean = float(np.mean(arr))
    half = float(Z_95 * np.std(arr, ddof=1) / np.sqrt(arr.size))
    return mean, half


def pearson(x, y) -> float:
    """Pearson correlation coefficient of two equal-length vectors.

    Raises
    ------
    UndefinedCorrelationError
        If either vector has zero variance.
    InvalidInputError
        On length mismatch, non-finite entries, or fewer than 2 points.
    """
    xa = np.asarray(x, dtype=np.float64).ravel()
    ya = np.asarray(y, dtype=np.float64).ravel()
    if xa.size != ya.size:
        raise InvalidInputError(f"length mismatch: {xa.size} vs {ya.size}")
    if xa.size < 2:
        raise InsufficientDataError("need at least 2 points for a correlation")
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise InvalidInputError("inputs contain non-finite entries")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    sx = np.linalg.norm(xc)
    sy = np.linalg.norm(yc)
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for zero-variance input")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def _splitmix64(x: int) -> int:
    """SplitMix64 finalizer; bijective mixing on 64-bit integers."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class RngStream:
    """A named, reproducible PCG-64 random stream.

    A stream is identified by ``(seed, stream_id)``; two streams constructed
    with the same pair yield identical draw sequences, and ``derive`` maps a
    small index to a statistically independent child stream so parallel work
    items each own a stream (results are then independent of scheduling).
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def derive(self, index: int) -> "RngStream":
        """Child stream for work item ``index``; deterministic in (self, index)."""
        if index < 0:
            raise InvalidInputError("derive index must be non-negative")
        mixed = _splitmix64((self.stream_id ^ _splitmix64(index + 1)) & 0xFFFFFFFFFFFFFFFF)
        return RngStream(self.seed, mixed)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def save_matrix_csv(path, m) -> None:
    """Write a matrix as headerless CSV with round-trip-exact float formatting."""
    m = as_matrix(m)
    with open(path, "w", encoding="utf-8") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def load_matrix_csv(path) -> np.ndarray:
    """Read a headerless CSV matrix written by :func:`save_matrix_csv`."""
    arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return as_matrix(arr, name=str(path))
