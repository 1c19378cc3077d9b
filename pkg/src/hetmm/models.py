"""Regression model contracts and the built-in exponential growth model.

A model bundles the mean function ``g(x, beta)``, its analytic gradient in
``beta``, and the variance covariate map ``h(x, beta)``.  The variance
function itself is the exponential link ``exp(lam . h(x, beta))``, so the
error scale at ``x`` is ``sigma * exp(lam . h(x, beta))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "ModelSpec",
    "VarianceOverflowError",
    "upsilon",
    "residuals",
    "exponential_experiment_model",
    "linear_model",
]

#: Largest exponent accepted when evaluating the variance function.
EXP_OVERFLOW_LIMIT = 700.0


class VarianceOverflowError(FloatingPointError):
    """Variance-function exponent exceeded the overflow guard.

    Carries the index of the offending observation so pipelines can flag
    the replication instead of propagating infinities.
    """

    def __init__(self, index: int, exponent: float):
        self.index = int(index)
        self.exponent = float(exponent)
        super().__init__(
            f"variance exponent {exponent:.3g} at observation {index} exceeds "
            f"{EXP_OVERFLOW_LIMIT:g}"
        )


@dataclass(frozen=True)
class ModelSpec:
    """Nonlinear regression model with a parametric variance covariate map.

    The evaluation maps must be vectorized over observations and free of
    side effects: ``g(x, beta) -> (n,)``, ``grad_g(x, beta) -> (n, p)`` and
    ``h(x, beta) -> (n, q)``.  Gradients are analytic (no automatic
    differentiation); the test suite checks them against central finite
    differences.  ``moment_start``, when provided, maps ``(x, y)`` to a
    cheap deterministic starting value for iterative fits.
    """

    p: int
    q: int
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    moment_start: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    name: str = "custom"

    def default_start(self, x, y) -> np.ndarray:
        """Starting value for iterative fits: the moment start if available."""
        if self.moment_start is not None:
            return np.asarray(self.moment_start(x, y), dtype=float)
        return np.ones(self.p)


def upsilon(model: ModelSpec, x, lam, beta) -> np.ndarray:
    """Variance function ``exp(lam . h(x, beta))``, overflow-guarded.

    Raises
    ------
    VarianceOverflowError
        If any inner product exceeds the overflow limit; contaminated
        samples can drive variance-parameter iterates into that territory.
    """
    x = np.asarray(x)
    beta = np.asarray(beta, dtype=float)
    lam = np.asarray(lam, dtype=float).reshape(model.q)
    H = np.asarray(model.h(x, beta), dtype=float).reshape(-1, model.q)
    expo = H @ lam
    worst = int(np.argmax(expo))
    if expo[worst] > EXP_OVERFLOW_LIMIT:
        raise VarianceOverflowError(worst, expo[worst])
    return np.exp(expo)


def residuals(x, y, model: ModelSpec, beta, lam=None) -> np.ndarray:
    """Variance-scaled residuals ``(y - g(x, beta)) / exp(lam . h(x, beta))``.

    With ``lam`` None or zero this returns the raw residuals.
    """
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("residuals require a non-empty sample")
    raw = y - np.asarray(model.g(x, np.asarray(beta, dtype=float)), dtype=float)
    if lam is None:
        return raw
    return raw / upsilon(model, x, lam, beta)


def _exp_g(x, beta):
    return beta[0] * np.exp(beta[1] * np.asarray(x, dtype=float))


def _exp_grad(x, beta):
    x = np.asarray(x, dtype=float)
    e = np.exp(beta[1] * x)
    return np.column_stack([e, beta[0] * x * e])


def _exp_h(x, beta):
    x = np.asarray(x, dtype=float)
    return ((x + 1.0) ** 2)[:, None]


def _loglinear_start(x, y):
    """Slope/intercept of log(max(y, eps)) on x, mapped back to the curve scale."""
    x = np.asarray(x, dtype=float)
    z = np.log(np.maximum(np.asarray(y, dtype=float), 1e-8))
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom <= 0.0:
        slope = 0.0
    else:
        slope = float(xc @ (z - z.mean())) / denom
    intercept = float(z.mean() - slope * x.mean())
    # clamp so a wild two-point subset cannot overflow the curve-scale map
    return np.array([np.exp(min(intercept, 700.0)), slope])


def exponential_experiment_model() -> ModelSpec:
    """Two-parameter exponential growth model with quadratic log-variance.

    Mean ``g(x, beta) = beta1 * exp(beta2 * x)`` with gradient
    ``(exp(beta2 x), beta1 x exp(beta2 x))``, and variance covariate
    ``h(x) = (x + 1)^2`` (independent of the regression parameter, so
    leverage can be weighted through the covariates directly).
    """
    return ModelSpec(
        p=2,
        q=1,
        g=_exp_g,
        grad_g=_exp_grad,
        h=_exp_h,
        moment_start=_loglinear_start,
        name="exp-growth",
    )


def linear_model(q_h: int = 1) -> ModelSpec:
    """Straight-line model ``g(x, beta) = beta1 + beta2 x`` with ``h(x) = x``.

    Used by tests as a case with closed-form least squares and exact
    equivariance; the variance covariate is the identity map.
    """

    def g(x, beta):
        return beta[0] + beta[1] * np.asarray(x, dtype=float)

    def grad(x, beta):
        x = np.asarray(x, dtype=float)
        return np.column_stack([np.ones_like(x), x])

    def h(x, beta):
        return np.asarray(x, dtype=float)[:, None]

    def start(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xc = x - x.mean()
        denom = float(xc @ xc)
        slope = float(xc @ (y - y.mean())) / denom if denom > 0 else 0.0
        return np.array([y.mean() - slope * x.mean(), slope])

    return ModelSpec(p=2, q=q_h, g=g, grad_g=grad, h=h, moment_start=start, name="linear")
