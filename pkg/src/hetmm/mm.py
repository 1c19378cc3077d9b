"""Robust MM regression: linear (for log-residual pseudo-regressions) and
S-initialized nonlinear fits with optional leverage weights.

Both estimators share the same two-stage recipe: a high-breakdown S stage
(best of ``n_subsets`` random elemental fits scored by the M-scale of their
full-sample residuals, then locally refined) fixes the scale, and an
efficient M stage minimizes the wider-tuned loss from that minimizer by
descent-guarded iteratively reweighted least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import BISQUARE_C_REGRESSION, BISQUARE_C_SCALE, BisquareRho
from .models import ModelSpec
from .nls import nonlinear_ls
from .scales import DegenerateScaleError, MScaleSpec, m_scale, m_scale_best_row

__all__ = [
    "MmOptions",
    "MmFit",
    "LinearMmFit",
    "SubsetFailureError",
    "linear_mm",
    "nonlinear_mm",
]

#: S-scales below this multiple of the response MAD are treated as exact fits.
_EXACT_FIT_FACTOR = 1e-10

_MAX_HALVINGS = 20
_S_REFINE_MAX_ITER = 50
_SUBSET_LM_MAX_ITER = 50


class SubsetFailureError(RuntimeError):
    """No usable candidate survived the random-subset initialization."""


@dataclass(frozen=True)
class MmOptions:
    """Tuning knobs shared by the MM estimators.

    ``rho0`` drives the high-breakdown scale stage, ``rho1`` the efficient
    refinement stage (its wider tuning constant makes ``rho1 <= rho0``
    pointwise).  ``n_subsets`` random elemental fits seed the search, and
    ``seed`` makes the whole fit reproducible.
    """

    rho0: BisquareRho = field(default_factory=lambda: BisquareRho(BISQUARE_C_SCALE))
    rho1: BisquareRho = field(default_factory=lambda: BisquareRho(BISQUARE_C_REGRESSION))
    b: float = 0.5
    n_subsets: int = 500
    max_irwls: int = 200
    tol: float = 1e-8
    seed: int = 0

    def scale_spec(self) -> MScaleSpec:
        return MScaleSpec(rho0=self.rho0, b=self.b)


@dataclass
class MmFit:
    """Nonlinear MM fit: final estimate plus scale-stage provenance.

    ``objective`` is the mean of ``rho1`` at the final estimate (weighted by
    the leverage weights); it never exceeds ``objective_at_start``, the value
    at the scale-stage minimizer the refinement started from.
    """

    beta: np.ndarray
    s_scale: float
    objective: float
    converged: bool
    exact_fit: bool = False
    iterations: int = 0
    objective_at_start: float = 0.0
    objective_trace: np.ndarray | None = None


@dataclass
class LinearMmFit:
    """Linear MM fit ``z ~ alpha + lam . v``.

    The slope stays consistent under asymmetric errors; the intercept need
    not, which is exactly what the log-residual pseudo-regressions rely on.
    """

    alpha: float
    lam: np.ndarray
    scale: float
    converged: bool
    exact_fit: bool = False
    objective: float = 0.0
    objective_trace: np.ndarray | None = None


def _draw_subsets(rng: np.random.Generator, n: int, size: int, count: int) -> np.ndarray:
    return np.array([rng.choice(n, size=size, replace=False) for _ in range(count)])


def _exact_fit_tol(values: np.ndarray) -> float:
    mad = float(np.median(np.abs(values - np.median(values))))
    return _EXACT_FIT_FACTOR * (mad if mad > 0.0 else 1.0)


def _scale_or_zero(resid: np.ndarray, spec: MScaleSpec, weights=None) -> float:
    """M-scale, with the no-positive-root degeneracies collapsed to 0."""
    try:
        return m_scale(resid, spec, weights=weights)
    except DegenerateScaleError:
        return 0.0


def _wls(design: np.ndarray, target: np.ndarray, case_weights: np.ndarray) -> np.ndarray:
    sw = np.sqrt(case_weights)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], target * sw, rcond=None)
    return coef


# ---------------------------------------------------------------------------
# linear estimator
# ---------------------------------------------------------------------------

def _linear_refine_s(X, z, theta, scale, spec: MScaleSpec):
    """Local IRWLS descent on the M-scale of the linear residuals."""
    for _ in range(_S_REFINE_MAX_ITER):
        u = (z - X @ theta) / scale
        cw = np.asarray(spec.rho0.weight(u), dtype=float)
        if not np.any(cw > 0.0):
            break
        step = _wls(X, z, cw) - theta
        accepted = False
        alpha = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = theta + alpha * step
            s_new = _scale_or_zero(z - X @ cand, spec)
            if s_new <= scale:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        gain = scale - s_new
        theta, scale = cand, s_new
        if scale == 0.0 or gain <= 1e-10 * max(scale, 1e-300):
            break
    return theta, scale


def _linear_mm_stage(X, z, theta, scale, options: MmOptions):
    rho1 = options.rho1
    obj = float(np.mean(rho1.rho((z - X @ theta) / scale)))
    trace = [obj]
    converged = False
    for _ in range(options.max_irwls):
        u = (z - X @ theta) / scale
        cw = np.asarray(rho1.weight(u), dtype=float)
        if not np.any(cw > 0.0):
            break
        step = _wls(X, z, cw) - theta
        accepted = False
        alpha = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = theta + alpha * step
            obj_new = float(np.mean(rho1.rho((z - X @ cand) / scale)))
            if np.isfinite(obj_new) and obj_new <= obj:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        moved = float(np.linalg.norm(alpha * step))
        theta, obj = cand, obj_new
        trace.append(obj)
        if moved <= options.tol * (1.0 + float(np.linalg.norm(theta))):
            converged = True
            break
    return theta, obj, converged, np.asarray(trace)


def linear_mm(z, V, options: MmOptions | None = None) -> LinearMmFit:
    """MM fit of the linear model ``z = alpha + lam . v + error``.

    The S stage takes the best of ``n_subsets`` random exact fits through
    ``q+1`` points, scored by the M-scale of the full-sample residuals and
    refined by guarded IRWLS; the M stage then minimizes the mean ``rho1``
    loss at that fixed scale.  A scale collapsing below ``1e-10`` times the
    response MAD short-circuits to the exact fit.

    Raises
    ------
    SubsetFailureError
        If every random subset has a collinear design or a non-finite fit.
    """
    options = options or MmOptions()
    z = np.asarray(z, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    n, q = V.shape
    if z.shape != (n,):
        raise ValueError(f"response shape {z.shape} does not match design ({n}, {q})")
    if n <= q + 1:
        raise ValueError(f"need more than q+1 = {q + 1} observations, got {n}")

    X = np.column_stack([np.ones(n), V])
    spec = options.scale_spec()
    rng = np.random.default_rng(np.random.SeedSequence(options.seed))
    idx = _draw_subsets(rng, n, q + 1, options.n_subsets)

    A = X[idx]
    ok = np.abs(np.linalg.det(A)) > 0.0
    if not ok.any():
        raise SubsetFailureError("collinear design in every random subset")
    Theta = np.full((idx.shape[0], q + 1), np.nan)
    Theta[ok] = np.linalg.solve(A[ok], z[idx][ok][:, :, None])[:, :, 0]

    with np.errstate(all="ignore"):
        R = z[None, :] - Theta @ X.T
    best, scale = m_scale_best_row(R, spec)
    if best < 0:
        raise SubsetFailureError("no subset produced finite residuals")
    theta = Theta[best].copy()

    exact_tol = _exact_fit_tol(z)
    if scale > exact_tol:
        theta, scale = _linear_refine_s(X, z, theta, scale, spec)
    if scale <= exact_tol:
        return LinearMmFit(
            alpha=float(theta[0]), lam=theta[1:], scale=scale,
            converged=True, exact_fit=True,
        )

    theta, obj, converged, trace = _linear_mm_stage(X, z, theta, scale, options)
    return LinearMmFit(
        alpha=float(theta[0]),
        lam=theta[1:],
        scale=scale,
        converged=converged,
        objective=obj,
        objective_trace=trace,
    )


# ---------------------------------------------------------------------------
# nonlinear estimator
# ---------------------------------------------------------------------------

def _candidate_residuals(x, y, model: ModelSpec, betas: np.ndarray) -> np.ndarray:
    R = np.empty((betas.shape[0], y.shape[0]))
    with np.errstate(all="ignore"):
        for i, b in enumerate(betas):
            R[i] = y - np.asarray(model.g(x, b), dtype=float)
    return R


def _nonlinear_refine_s(x, y, model, beta, scale, spec, lev_w):
    for _ in range(_S_REFINE_MAX_ITER):
        e = y - np.asarray(model.g(x, beta), dtype=float)
        u = e / scale
        cw = np.asarray(spec.rho0.weight(u), dtype=float) * lev_w
        if not np.any(cw > 0.0):
            break
        J = np.asarray(model.grad_g(x, beta), dtype=float)
        step = _wls(J, e, cw)
        accepted = False
        alpha = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = beta + alpha * step
            with np.errstate(all="ignore"):
                e_new = y - np.asarray(model.g(x, cand), dtype=float)
            if not np.all(np.isfinite(e_new)):
                alpha *= 0.5
                continue
            s_new = _scale_or_zero(e_new, spec, weights=lev_w)
            if s_new <= scale:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        gain = scale - s_new
        beta, scale = cand, s_new
        if scale == 0.0 or gain <= 1e-10 * max(scale, 1e-300):
            break
    return beta, scale


def _irwls_mm(x, y, model, beta0, sigma, divisors, lev_w, options: MmOptions):
    """Descent-guarded weighted Gauss-Newton on the rho1 objective.

    Minimizes ``mean(rho1((y - g(x, beta)) / (sigma * divisors)) * lev_w)``
    with the divisors held fixed, starting from ``beta0``.
    """
    rho1 = options.rho1

    def objective(b):
        with np.errstate(all="ignore"):
            u = (y - np.asarray(model.g(x, b), dtype=float)) / (sigma * divisors)
        if not np.all(np.isfinite(u)):
            return np.inf, u
        return float(np.mean(rho1.rho(u) * lev_w)), u

    beta = np.asarray(beta0, dtype=float).copy()
    obj, u = objective(beta)
    if not np.isfinite(obj):
        raise FloatingPointError("starting value yields non-finite residuals")
    trace = [obj]
    converged = False
    iterations = 0
    for iterations in range(1, options.max_irwls + 1):
        cw = np.asarray(rho1.weight(u), dtype=float) * lev_w / (divisors * divisors)
        if not np.any(cw > 0.0):
            break
        e = y - np.asarray(model.g(x, beta), dtype=float)
        J = np.asarray(model.grad_g(x, beta), dtype=float)
        if not np.all(np.isfinite(J)):
            break
        step = _wls(J, e, cw)
        accepted = False
        alpha = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = beta + alpha * step
            obj_new, u_new = objective(cand)
            if obj_new <= obj:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        moved = float(np.linalg.norm(alpha * step))
        beta, obj, u = cand, obj_new, u_new
        trace.append(obj)
        if moved <= options.tol * (1.0 + float(np.linalg.norm(beta))):
            converged = True
            break
    return beta, obj, converged, iterations, np.asarray(trace)


def nonlinear_mm(
    x,
    y,
    model: ModelSpec,
    options: MmOptions | None = None,
    leverage_weights=None,
    scale_override=None,
    beta0=None,
) -> MmFit:
    """S-initialized nonlinear MM fit with optional leverage weights.

    Without ``scale_override`` this runs the full two-stage estimator: the
    S stage fits ``n_subsets`` random p-point subsets by Levenberg-Marquardt
    from the model's moment start, scores them by the (leverage-weighted)
    M-scale of the full-sample raw residuals, refines the best one, and
    fixes the scale; the M stage then minimizes the mean weighted ``rho1``
    loss from that minimizer.

    With ``scale_override = (sigma, divisors)`` the scale stage is skipped:
    residuals are divided by ``sigma * divisors`` (the divisors frozen, as
    in a variance-stabilized refit) and the M stage starts from the required
    ``beta0``.

    Raises
    ------
    SubsetFailureError
        If no random subset yields a usable candidate.
    """
    options = options or MmOptions()
    x = np.asarray(x)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < model.p + 1:
        raise ValueError(f"need at least p+1 = {model.p + 1} observations, got {n}")
    lev_w = np.ones(n) if leverage_weights is None else np.asarray(leverage_weights, dtype=float)
    if lev_w.shape != (n,) or np.any(lev_w < 0):
        raise ValueError("leverage weights must be a nonnegative vector of length n")
    spec = options.scale_spec()

    if scale_override is not None:
        sigma, divisors = scale_override
        sigma = float(sigma)
        divisors = np.asarray(divisors, dtype=float)
        if sigma <= 0.0 or np.any(divisors <= 0.0):
            raise ValueError("scale_override requires a positive scale and divisors")
        if beta0 is None:
            raise ValueError("beta0 is required when scale_override is given")
        beta, obj, converged, iterations, trace = _irwls_mm(
            x, y, model, beta0, sigma, divisors, lev_w, options
        )
        return MmFit(
            beta=beta,
            s_scale=sigma,
            objective=obj,
            converged=converged,
            iterations=iterations,
            objective_at_start=float(trace[0]),
            objective_trace=trace,
        )

    rng = np.random.default_rng(np.random.SeedSequence(options.seed))
    subsets = _draw_subsets(rng, n, model.p, options.n_subsets)
    candidates = []
    for idx in subsets:
        xs, ys = x[idx], y[idx]
        try:
            fit = nonlinear_ls(
                xs, ys, model, model.default_start(xs, ys), max_iter=_SUBSET_LM_MAX_ITER
            )
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.all(np.isfinite(fit.beta)):
            candidates.append(fit.beta)
    if not candidates:
        raise SubsetFailureError("every random p-point subset fit failed")

    B = np.asarray(candidates)
    best, s_scale = m_scale_best_row(
        _candidate_residuals(x, y, model, B), spec, weights=lev_w
    )
    if best < 0:
        raise SubsetFailureError("no subset produced finite residuals")
    beta_s = B[best].copy()

    exact_tol = _exact_fit_tol(y)
    if s_scale > exact_tol:
        beta_s, s_scale = _nonlinear_refine_s(x, y, model, beta_s, s_scale, spec, lev_w)
    if s_scale <= exact_tol:
        return MmFit(
            beta=beta_s, s_scale=s_scale, objective=0.0, converged=True, exact_fit=True
        )

    beta, obj, converged, iterations, trace = _irwls_mm(
        x, y, model, beta_s, s_scale, np.ones(n), lev_w, options
    )
    return MmFit(
        beta=beta,
        s_scale=s_scale,
        objective=obj,
        converged=converged,
        iterations=iterations,
        objective_at_start=float(trace[0]),
        objective_trace=trace,
    )
