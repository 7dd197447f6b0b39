"""Exception and warning types shared across the package."""

from __future__ import annotations


class InvalidInputError(ValueError):
    """An argument violates a documented precondition (shape, finiteness, range)."""


class InsufficientDataError(InvalidInputError):
    """Too few samples for the requested statistic (e.g. a CI needs n >= 2)."""


class UndefinedCorrelationError(InvalidInputError):
    """Pearson correlation requested for a zero-variance column."""


class UndefinedDistanceError(InvalidInputError):
    """Cosine distance requested for a zero-magnitude embedding."""


class CcaOvershootError(RuntimeError):
    """A canonical correlation exceeded 1 + 1e-6, indicating an ill-conditioned
    covariance inversion rather than ordinary rounding (values in (1, 1+1e-6]
    are clipped silently)."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped above its gradient-norm tolerance."""

    def __init__(self, message: str, grad_norm: float | None = None):
        super().__init__(message)
        self.grad_norm = grad_norm


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss. Carries the last finite parameters."""

    def __init__(self, message: str, last_params=None, iteration: int | None = None):
        super().__init__(message)
        self.last_params = last_params
        self.iteration = iteration


class SafetyMarginWarning(UserWarning):
    """A feature-distance metric ran with fewer examples than the safety margin
    requires (n_examples < safety_factor * n_features); the value is reported
    but should be treated as unreliable."""
