"""Stepwise robust estimation pipelines for heteroscedastic nonlinear models.

Two routes to the full parameter set ``(beta, sigma, lam)``:

``fit_stepwise``
    1. initial robust MM fit computed as if the variance were constant;
    2. joint estimation of ``(sigma, lam)`` from the centered M-scale
       system at the initial fit;
    3. MM refit with residuals divided by the fitted variance function
       (frozen at the initial fit), which is the homoscedastic fit of the
       variance-stabilized pseudo-observations;
    4. variance-parameter refinement: robust linear fit of log absolute
       residuals on the variance covariates (slope only; the intercept is
       exposed as a diagnostic because it is biased for asymmetric errors).

``fit_stepwise_n``
    Same skeleton, but the variance parameters come from the log-residual
    linear MM fit up front (stage 2a), the scale from an M-scale of the
    rescaled residuals (2b), and stage 4 repeats both at the refit,
    yielding ``lambda_refined`` and ``sigma_refined``.

Leverage control: ``weighting="bisquare-leverage"`` downweights covariate
outliers both in the MM objectives and in the joint scale system, turning
MM/HMM/HMM_N into their weighted counterparts WMM/HWMM/HWMM_N.
"""

from __future__ import annotations

import numpy as np

from .kernels import (
    LEVERAGE_CUTOFF_1D,
    NORMAL_MAD_CONSISTENCY,
    UNIFORM_MAD_FACTOR,
    BisquareRho,
    median_mad,
)
from .mm import MmFit, MmOptions, SubsetFailureError, linear_mm, nonlinear_mm
from .models import ModelSpec, residuals, upsilon
from .nls import guarded_log_abs, nonlinear_ls, weighted_ls_pipeline
from .results import METHOD_TAGS, FitResult
from .scales import DegenerateScaleError, ScaleBracketError, m_scale, solve_sigma_lambda

__all__ = [
    "WEIGHTING_UNWEIGHTED",
    "WEIGHTING_BISQUARE",
    "bisquare_leverage_weights",
    "robust_distance_weights",
    "fit_stepwise",
    "fit_stepwise_n",
    "fit_classical",
    "fit_method",
    "fit_estimators",
]

WEIGHTING_UNWEIGHTED = "unweighted"
WEIGHTING_BISQUARE = "bisquare-leverage"

#: Errors that mark a stage as failed but leave earlier stages usable.
_STAGE_ERRORS = (
    DegenerateScaleError,
    ScaleBracketError,
    SubsetFailureError,
    np.linalg.LinAlgError,
    FloatingPointError,
)

_MIN_OBS_MARGIN = 2  # stepwise fits need n >= p + q + 2


#: Default spread convention for the leverage weights: the MAD in its
#: normal-consistency form (as MAD routines conventionally report it)
#: rescaled by the uniform-design factor.  The raw-MAD spread makes the
#: bisquare decline bite hard on clean uniform covariates and costs the
#: weighted fits far more efficiency than the few percent they should lose.
LEVERAGE_MAD_FACTOR = UNIFORM_MAD_FACTOR * NORMAL_MAD_CONSISTENCY


def bisquare_leverage_weights(
    x, cutoff: float = LEVERAGE_CUTOFF_1D, mad_factor: float = LEVERAGE_MAD_FACTOR
) -> np.ndarray:
    """Leverage weights for a scalar covariate.

    Standardizes each ``x`` by its median and a MAD-based spread, squares
    the standardized distance, and applies the bisquare downweighting with
    the 0.95 chi-square(1) cutoff: weights decline smoothly with leverage
    and vanish for gross covariate outliers, while a clean uniform sample
    keeps weights near 1 (edge points retain roughly 3/4 weight under the
    default spread).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("bisquare_leverage_weights expects a scalar covariate vector")
    loc_scale = median_mad(x, consistency=mad_factor)
    if loc_scale.scale <= 0:
        raise ValueError("covariate spread is degenerate; cannot form leverage weights")
    t = ((x - loc_scale.location) / loc_scale.scale) ** 2
    return np.asarray(BisquareRho(cutoff).weight(t), dtype=float)


def robust_distance_weights(X, quantile: float = 0.95) -> np.ndarray:
    """Multivariate analogue of the leverage weights (coordinatewise
    robust standardization, squared distance, chi-square(k) cutoff).

    Exposed for completeness; only the scalar version is exercised by the
    built-in experiment.
    """
    from scipy.stats import chi2

    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return bisquare_leverage_weights(X)
    n, k = X.shape
    normal_mad_factor = 1.482602218505602
    d2 = np.zeros(n)
    for j in range(k):
        ls = median_mad(X[:, j], consistency=normal_mad_factor)
        if ls.scale <= 0:
            raise ValueError(f"covariate column {j} has degenerate spread")
        d2 += ((X[:, j] - ls.location) / ls.scale) ** 2
    return np.asarray(BisquareRho(float(chi2.ppf(quantile, k))).weight(d2), dtype=float)


def _leverage(x, weighting: str) -> np.ndarray | None:
    if weighting == WEIGHTING_UNWEIGHTED:
        return None
    if weighting == WEIGHTING_BISQUARE:
        return bisquare_leverage_weights(np.asarray(x, dtype=float))
    raise ValueError(
        f"unknown weighting {weighting!r}; expected "
        f"{WEIGHTING_UNWEIGHTED!r} or {WEIGHTING_BISQUARE!r}"
    )


def _child_options(options: MmOptions, stream: int) -> MmOptions:
    """Derive a stage-specific seed so the pipeline stages draw independent
    subsets while remaining reproducible from the top-level seed."""
    child = int(np.random.SeedSequence([options.seed, stream]).generate_state(1)[0])
    return MmOptions(
        rho0=options.rho0,
        rho1=options.rho1,
        b=options.b,
        n_subsets=options.n_subsets,
        max_irwls=options.max_irwls,
        tol=options.tol,
        seed=child,
    )


def _check_stepwise_preconditions(y, model: ModelSpec) -> None:
    n = np.asarray(y).shape[0]
    needed = model.p + model.q + _MIN_OBS_MARGIN
    if n < needed:
        raise ValueError(f"stepwise fits need at least p+q+2 = {needed} observations, got {n}")


def _log_residual_mm(x, y, model, beta, options, diagnostics, stage):
    """Robust linear fit of log|y - g| on h(x, beta); returns (alpha, lam).

    Short-circuits to a zero slope when the residuals are numerically zero
    (an exact fit carries no variance information).
    """
    e = y - np.asarray(model.g(x, beta), dtype=float)
    span = median_mad(y).scale or 1.0
    if np.all(np.abs(e) <= 1e-12 * span):
        diagnostics[stage] = {"degenerate_residuals": True}
        return 0.0, np.zeros(model.q)
    z = guarded_log_abs(e)
    V = np.asarray(model.h(x, beta), dtype=float).reshape(len(z), model.q)
    fit = linear_mm(z, V, options)
    diagnostics[stage] = {
        "converged": fit.converged,
        "exact_fit": fit.exact_fit,
        "intercept": fit.alpha,
    }
    return fit.alpha, fit.lam


def _exact_fit_result(method: str, step1: MmFit, model: ModelSpec, n_pipeline: bool) -> FitResult:
    """Zero-noise short-circuit: the initial fit interpolates the data, so
    the variance parameters are undetectable and reported as zero."""
    diag = {"step1": {"converged": True, "exact_fit": True}, "exact_fit": True}
    return FitResult(
        method=method,
        beta_ini=step1.beta,
        beta=step1.beta,
        sigma=0.0,
        lam=np.zeros(model.q),
        lambda_refined=None if method in ("MM", "WMM") else np.zeros(model.q),
        sigma_refined=0.0 if n_pipeline else None,
        converged=True,
        diagnostics=diag,
    )


def _robust_group(
    x, y, model: ModelSpec, options: MmOptions, weighting: str, wanted: set[str], step1=None
) -> dict[str, FitResult]:
    """Fit the robust estimators that share one leverage-weighting choice.

    The initial fit is computed once; the joint-system route and the
    log-residual route both start from it.  Stage failures are recorded and
    produce partial results instead of aborting.
    """
    weighted = weighting == WEIGHTING_BISQUARE
    ini_tag, step_tag, n_tag = ("WMM", "HWMM", "HWMM_N") if weighted else ("MM", "HMM", "HMM_N")
    lev = _leverage(x, weighting)

    if step1 is None:
        step1 = nonlinear_mm(x, y, model, _child_options(options, 1), leverage_weights=lev)
    if step1.exact_fit:
        return {
            tag: _exact_fit_result(tag, step1, model, n_pipeline=tag.endswith("_N"))
            for tag in wanted
        }
    beta_ini = step1.beta
    step1_diag = {
        "converged": step1.converged,
        "iterations": step1.iterations,
        "s_scale": step1.s_scale,
    }
    out: dict[str, FitResult] = {}

    if wanted & {ini_tag, step_tag}:
        diag: dict = {"step1": step1_diag}
        sigma = lam = None
        try:
            step2 = solve_sigma_lambda(x, y, beta_ini, model, w2=lev)
            sigma, lam = step2.sigma, step2.lam
            diag["step2"] = {
                "converged": step2.converged,
                "iterations": step2.iterations,
                "residual_norm": step2.final_residual_norm,
            }
        except _STAGE_ERRORS as err:
            diag["step2"] = {"error": str(err)}

        if ini_tag in wanted:
            out[ini_tag] = FitResult(
                method=ini_tag,
                beta_ini=beta_ini,
                beta=beta_ini,
                sigma=sigma,
                lam=lam,
                converged=bool(
                    step1.converged and sigma is not None and diag["step2"].get("converged")
                ),
                diagnostics=dict(diag),
            )

        if step_tag in wanted:
            sdiag = dict(diag)
            beta = lam_ref = None
            if sigma is not None:
                try:
                    div = upsilon(model, x, lam, beta_ini)
                    step3 = nonlinear_mm(
                        x,
                        y,
                        model,
                        options,
                        leverage_weights=lev,
                        scale_override=(sigma, div),
                        beta0=beta_ini,
                    )
                    beta = step3.beta
                    sdiag["step3"] = {
                        "converged": step3.converged,
                        "iterations": step3.iterations,
                        "objective": step3.objective,
                    }
                except _STAGE_ERRORS as err:
                    sdiag["step3"] = {"error": str(err)}
            if beta is not None:
                try:
                    _, lam_ref = _log_residual_mm(
                        x, y, model, beta, _child_options(options, 4), sdiag, "step4"
                    )
                except _STAGE_ERRORS as err:
                    sdiag["step4"] = {"error": str(err)}
            ok = (
                step1.converged
                and sigma is not None
                and beta is not None
                and lam_ref is not None
                and sdiag.get("step3", {}).get("converged", False)
            )
            out[step_tag] = FitResult(
                method=step_tag,
                beta_ini=beta_ini,
                beta=beta,
                sigma=sigma,
                lam=lam,
                lambda_refined=lam_ref,
                converged=bool(ok),
                diagnostics=sdiag,
            )

    if n_tag in wanted:
        ndiag: dict = {"step1": step1_diag}
        sigma_n = lam_n = beta_n = lam_ref_n = sigma_ref = None
        try:
            _, lam_n = _log_residual_mm(
                x, y, model, beta_ini, _child_options(options, 2), ndiag, "step2a"
            )
            sigma_n = _m_scale_of_rescaled(x, y, model, beta_ini, lam_n)
            ndiag["step2b"] = {"sigma": sigma_n}
        except _STAGE_ERRORS as err:
            ndiag["step2"] = {"error": str(err)}

        if sigma_n is not None and sigma_n > 0.0:
            try:
                div = upsilon(model, x, lam_n, beta_ini)
                step3 = nonlinear_mm(
                    x,
                    y,
                    model,
                    options,
                    leverage_weights=lev,
                    scale_override=(sigma_n, div),
                    beta0=beta_ini,
                )
                beta_n = step3.beta
                ndiag["step3"] = {
                    "converged": step3.converged,
                    "iterations": step3.iterations,
                    "objective": step3.objective,
                }
            except _STAGE_ERRORS as err:
                ndiag["step3"] = {"error": str(err)}
        if beta_n is not None:
            try:
                _, lam_ref_n = _log_residual_mm(
                    x, y, model, beta_n, _child_options(options, 5), ndiag, "step4a"
                )
                sigma_ref = _m_scale_of_rescaled(x, y, model, beta_n, lam_ref_n)
                ndiag["step4b"] = {"sigma": sigma_ref}
            except _STAGE_ERRORS as err:
                ndiag["step4"] = {"error": str(err)}
        ok = (
            step1.converged
            and sigma_n is not None
            and beta_n is not None
            and lam_ref_n is not None
            and sigma_ref is not None
            and ndiag.get("step3", {}).get("converged", False)
        )
        out[n_tag] = FitResult(
            method=n_tag,
            beta_ini=beta_ini,
            beta=beta_n,
            sigma=sigma_n,
            lam=lam_n,
            lambda_refined=lam_ref_n,
            sigma_refined=sigma_ref,
            converged=bool(ok),
            diagnostics=ndiag,
        )

    return out


def _m_scale_of_rescaled(x, y, model, beta, lam) -> float:
    return float(m_scale(residuals(x, y, model, beta, lam)))


def fit_stepwise(
    x, y, model: ModelSpec, options: MmOptions | None = None,
    weighting: str = WEIGHTING_UNWEIGHTED, step1: MmFit | None = None,
) -> FitResult:
    """Stepwise fit with jointly estimated scale and variance parameters.

    Returns the ``HMM`` (or ``HWMM`` under bisquare leverage weighting)
    result: ``beta_ini`` from the variance-blind MM fit, ``sigma``/``lam``
    from the joint M-scale system, ``beta`` from the variance-stabilized MM
    refit, and ``lambda_refined`` from the robust log-residual regression
    at the refit.  A precomputed ``step1`` may be passed when several
    variants are fitted on the same sample.
    """
    options = options or MmOptions()
    _check_stepwise_preconditions(y, model)
    weighted = weighting == WEIGHTING_BISQUARE
    tag = "HWMM" if weighted else "HMM"
    return _robust_group(x, y, model, options, weighting, {tag}, step1=step1)[tag]


def fit_stepwise_n(
    x, y, model: ModelSpec, options: MmOptions | None = None,
    weighting: str = WEIGHTING_UNWEIGHTED, step1: MmFit | None = None,
) -> FitResult:
    """Stepwise fit with log-residual-regression variance estimation.

    Returns the ``HMM_N`` (or ``HWMM_N``) result: the variance parameters
    come from a robust linear fit of log absolute residuals before and
    after the variance-stabilized refit, and the scale from an M-scale of
    the correspondingly rescaled residuals, so ``sigma_refined`` and
    ``lambda_refined`` reflect the final fit.
    """
    options = options or MmOptions()
    _check_stepwise_preconditions(y, model)
    weighted = weighting == WEIGHTING_BISQUARE
    tag = "HWMM_N" if weighted else "HMM_N"
    return _robust_group(x, y, model, options, weighting, {tag}, step1=step1)[tag]


def fit_classical(x, y, model: ModelSpec, variant: str = "LS", beta0=None) -> FitResult:
    """Least squares baselines: plain (``LS``) or variance-weighted (``HLS``)."""
    if variant == "LS":
        y = np.asarray(y, dtype=float)
        start = model.default_start(x, y) if beta0 is None else beta0
        fit = nonlinear_ls(x, y, model, start)
        n = y.shape[0]
        dof = max(n - model.p, 1)
        return FitResult(
            method="LS",
            beta_ini=fit.beta,
            beta=fit.beta,
            sigma=float(np.sqrt(fit.rss / dof)),
            converged=fit.converged,
            diagnostics={"ls": {"converged": fit.converged, "iterations": fit.iterations}},
        )
    if variant == "HLS":
        return weighted_ls_pipeline(x, y, model, beta0=beta0)
    raise ValueError(f"unknown classical variant {variant!r}; expected 'LS' or 'HLS'")


_GROUPS = {
    WEIGHTING_UNWEIGHTED: ("MM", "HMM", "HMM_N"),
    WEIGHTING_BISQUARE: ("WMM", "HWMM", "HWMM_N"),
}


def fit_estimators(
    x, y, model: ModelSpec, methods, options: MmOptions | None = None
) -> dict[str, FitResult]:
    """Fit several estimators on one sample, sharing common stages.

    The robust variants with the same leverage weighting share their
    initial fit (and, where applicable, the joint scale system), so asking
    for e.g. ``["MM", "HMM", "HMM_N"]`` costs one initial subset search.
    Results are keyed by method tag.
    """
    options = options or MmOptions()
    methods = list(methods)
    for m in methods:
        if m not in METHOD_TAGS:
            raise ValueError(f"unknown estimator tag {m!r}; expected one of {METHOD_TAGS}")
    out: dict[str, FitResult] = {}
    if "LS" in methods:
        out["LS"] = fit_classical(x, y, model, "LS")
    if "HLS" in methods:
        out["HLS"] = fit_classical(x, y, model, "HLS")
    for weighting, group in _GROUPS.items():
        wanted = set(methods) & set(group)
        if not wanted:
            continue
        _check_stepwise_preconditions(y, model)
        out.update(_robust_group(x, y, model, options, weighting, wanted))
    return out


def fit_method(
    x, y, model: ModelSpec, method: str, options: MmOptions | None = None
) -> FitResult:
    """Fit a single estimator selected by its method tag."""
    return fit_estimators(x, y, model, [method], options=options)[method]
