"""Classical nonlinear least squares (Levenberg-Marquardt) and the
variance-weighted least squares pipeline used as the non-robust baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelSpec, residuals, upsilon
from .results import FitResult

__all__ = ["LsFit", "RankDeficientError", "nonlinear_ls", "weighted_ls_pipeline"]

#: Mean of log|e| for a standard normal e: -(euler_gamma + log 2) / 2.
LOG_ABS_NORMAL_MEAN = -(np.euler_gamma + np.log(2.0)) / 2.0

#: Floor applied to absolute residuals before taking logarithms.
_LOG_FLOOR = 1e-12

_MU_INIT_FACTOR = 1e-3
_MU_GROW = 10.0
_MU_SHRINK = 3.0
_MAX_REJECTS = 60


class RankDeficientError(np.linalg.LinAlgError):
    """Normal equations unsolvable at every damping level."""


@dataclass
class LsFit:
    """Result of a (case-weighted) nonlinear least squares fit.

    ``rss`` is the weighted residual sum of squares at ``beta``;
    ``rss_trace`` holds the value after each accepted step, which is
    non-increasing by construction.
    """

    beta: np.ndarray
    rss: float
    converged: bool
    iterations: int
    rss_trace: np.ndarray


def nonlinear_ls(
    x,
    y,
    model: ModelSpec,
    beta0,
    case_weights=None,
    max_iter: int = 500,
    gtol: float = 1e-8,
    step_tol: float = 1e-10,
) -> LsFit:
    """Minimize ``sum(w_i (y_i - g(x_i, beta))^2)`` by Levenberg-Marquardt.

    Damping starts at ``1e-3 * max diag(J'WJ)``, grows by 10 on rejected
    steps and shrinks by 3 on accepted ones; accepted steps never increase
    the weighted RSS.  Convergence is declared when the gradient max-norm
    drops below ``gtol * (1 + rss)`` or the step norm below ``step_tol``.

    Raises
    ------
    RankDeficientError
        If the damped normal equations stay unsolvable at every damping
        level (in practice: non-finite Jacobian entries).
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta0, dtype=float).copy()
    n = y.shape[0]
    if n < model.p:
        raise ValueError(f"need at least p = {model.p} observations, got {n}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("starting value must be finite")
    w = np.ones(n) if case_weights is None else np.asarray(case_weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("case weights must be nonnegative")

    def weighted_rss(b: np.ndarray) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            r = y - np.asarray(model.g(x, b), dtype=float)
            return float(np.dot(w, r * r))

    with np.errstate(all="ignore"):
        r = y - np.asarray(model.g(x, beta), dtype=float)
        rss = float(np.dot(w, r * r))
    trace = [rss]
    mu = None
    converged = False
    polished = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        with np.errstate(all="ignore"):
            J = np.asarray(model.grad_g(x, beta), dtype=float)
            Jw = J * w[:, None]
            A = J.T @ Jw
            grad = Jw.T @ r
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(grad))):
            raise RankDeficientError("non-finite Jacobian or normal equations")
        if float(np.max(np.abs(grad))) <= gtol * (1.0 + rss):
            converged = True
            if polished:
                break
            # one more damped step: near the optimum it contracts the error
            # by ~mu/lambda_min, which is what closed-form comparisons see
            polished = True
        if mu is None:
            mu = _MU_INIT_FACTOR * float(np.max(np.diag(A)))
            if mu <= 0.0:
                mu = _MU_INIT_FACTOR

        accepted = False
        step = None
        for _ in range(_MAX_REJECTS):
            try:
                step = np.linalg.solve(A + mu * np.eye(model.p), grad)
            except np.linalg.LinAlgError:
                mu *= _MU_GROW
                continue
            rss_new = weighted_rss(beta + step)
            if np.isfinite(rss_new) and rss_new <= rss:
                accepted = True
                break
            mu *= _MU_GROW
        if step is None:
            raise RankDeficientError("normal equations singular at every damping level")
        if not accepted:
            break

        beta = beta + step
        with np.errstate(all="ignore"):
            r = y - np.asarray(model.g(x, beta), dtype=float)
            rss = float(np.dot(w, r * r))
        trace.append(rss)
        mu /= _MU_SHRINK
        if float(np.linalg.norm(step)) <= step_tol:
            converged = True
            break

    return LsFit(
        beta=beta,
        rss=rss,
        converged=converged,
        iterations=iterations,
        rss_trace=np.asarray(trace),
    )


def guarded_log_abs(values: np.ndarray) -> np.ndarray:
    """log|v| with |v| floored at 1e-12 so exact fits do not produce -inf."""
    return np.log(np.maximum(np.abs(values), _LOG_FLOOR))


def weighted_ls_pipeline(
    x, y, model: ModelSpec, beta0=None, max_iter: int = 500
) -> FitResult:
    """Variance-weighted least squares (tag ``HLS``).

    Three passes: an ordinary least squares fit, an ordinary-least-squares
    regression of log absolute residuals on the variance covariates to get
    the variance parameters, and a case-weighted least squares refit with
    weights ``1/upsilon^2``.  The primary scale estimate is the sample
    standard deviation of the rescaled residuals; the log-intercept-based
    alternative ``exp(alpha + 0.6352)`` is reported as a diagnostic.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < model.p + model.q + 1:
        raise ValueError(
            f"need at least p+q+1 = {model.p + model.q + 1} observations, got {n}"
        )
    start = model.default_start(x, y) if beta0 is None else np.asarray(beta0, dtype=float)

    ls = nonlinear_ls(x, y, model, start, max_iter=max_iter)
    z = guarded_log_abs(y - np.asarray(model.g(x, ls.beta), dtype=float))
    H = np.asarray(model.h(x, ls.beta), dtype=float).reshape(n, model.q)
    X = np.column_stack([np.ones(n), H])
    coef, *_ = np.linalg.lstsq(X, z, rcond=None)
    alpha, lam = float(coef[0]), coef[1:]

    v = upsilon(model, x, lam, ls.beta)
    refit = nonlinear_ls(x, y, model, ls.beta, case_weights=1.0 / (v * v), max_iter=max_iter)
    scaled = residuals(x, y, model, refit.beta, lam)
    sigma = float(np.std(scaled, ddof=1))

    return FitResult(
        method="HLS",
        beta_ini=ls.beta,
        beta=refit.beta,
        sigma=sigma,
        lam=lam,
        converged=bool(ls.converged and refit.converged),
        diagnostics={
            "ls": {"converged": ls.converged, "iterations": ls.iterations},
            "refit": {"converged": refit.converged, "iterations": refit.iterations},
            "log_intercept": alpha,
            "sigma_from_log_intercept": float(np.exp(alpha - LOG_ABS_NORMAL_MEAN)),
        },
    )
