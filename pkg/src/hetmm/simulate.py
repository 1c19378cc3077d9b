"""Monte Carlo harness: sample generation, contamination schemes,
replication management and MSE/bias/curve-ensemble reporting."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .mm import MmOptions
from .models import ModelSpec, exponential_experiment_model
from .pipelines import fit_estimators
from .results import METHOD_TAGS, FitResult

__all__ = [
    "GroundTruth",
    "ContaminationScheme",
    "NAMED_SCHEMES",
    "ExperimentConfig",
    "SimulationReport",
    "generate_sample",
    "apply_contamination",
    "run_experiment",
    "summarize_curves",
]

#: Reporting grid for variance-function curves: 101 equispaced points on
#: [0, 1], the clean covariate range (leverage-contaminated covariates lie
#: outside it by design).
CURVE_GRID = np.arange(101) / 100.0

MODEL_REGISTRY = {"exp-growth": exponential_experiment_model}


@dataclass(frozen=True)
class GroundTruth:
    """Generating parameter values ``(beta, lam, sigma)``."""

    beta: tuple[float, ...] = (5.0, 2.0)
    lam: tuple[float, ...] = (1.0,)
    sigma: float = 1.0

    def beta_arr(self) -> np.ndarray:
        return np.asarray(self.beta, dtype=float)

    def lam_arr(self) -> np.ndarray:
        return np.asarray(self.lam, dtype=float)


@dataclass(frozen=True)
class ContaminationScheme:
    """Replace the trailing ``ceil(fraction * n)`` observations by
    ``(x0 + u, y0)`` with jitter ``u ~ N(0, jitter_sd^2)``.

    The tiny jitter keeps repeated contamination points from destabilizing
    the fitting algorithms; a zero fraction is the identity (and consumes
    no random numbers).
    """

    name: str
    fraction: float = 0.0
    x0: float = 0.0
    y0: float = 0.0
    jitter_sd: float = 1e-4


#: The benchmark schemes: C1-C3 are vertical outliers at a low-leverage
#: covariate, D1-D2 put the contamination far outside the covariate range.
NAMED_SCHEMES = {
    "C0": ContaminationScheme("C0"),
    "C1": ContaminationScheme("C1", 0.05, x0=0.01, y0=25.0),
    "C2": ContaminationScheme("C2", 0.05, x0=0.01, y0=50.0),
    "C3": ContaminationScheme("C3", 0.05, x0=0.01, y0=100.0),
    "D1": ContaminationScheme("D1", 0.05, x0=3.5, y0=90.0),
    "D2": ContaminationScheme("D2", 0.05, x0=3.5, y0=150.0),
}


def generate_sample(n: int, truth: GroundTruth, seed, model: ModelSpec | None = None):
    """Draw ``(x, y)`` with ``x ~ U(0,1)`` and
    ``y = g(x, beta) + sigma * exp(lam . h(x, beta)) * eps``, ``eps ~ N(0,1)``."""
    if n < 1:
        raise ValueError("sample size must be at least 1")
    model = model or exponential_experiment_model()
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    eps = rng.standard_normal(n)
    beta = truth.beta_arr()
    H = np.asarray(model.h(x, beta), dtype=float).reshape(n, model.q)
    y = np.asarray(model.g(x, beta), dtype=float) + truth.sigma * np.exp(
        H @ truth.lam_arr()
    ) * eps
    return x, y


def apply_contamination(x, y, scheme: ContaminationScheme, seed):
    """Contaminate a sample per the scheme; fraction 0 returns copies unchanged."""
    x = np.asarray(x, dtype=float).copy()
    y = np.asarray(y, dtype=float).copy()
    if scheme.fraction <= 0.0:
        return x, y
    n = x.shape[0]
    k = math.ceil(scheme.fraction * n)
    if k > n:
        raise ValueError("contamination fraction exceeds the sample")
    rng = np.random.default_rng(seed)
    x[-k:] = scheme.x0 + rng.normal(0.0, scheme.jitter_sd, k)
    y[-k:] = scheme.y0
    return x, y


@dataclass
class ExperimentConfig:
    """Everything needed to rerun a contamination experiment."""

    n: int = 100
    nrep: int = 1000
    master_seed: int = 20230817
    schemes: list[ContaminationScheme] = field(
        default_factory=lambda: [NAMED_SCHEMES["C0"]]
    )
    estimators: list[str] = field(default_factory=lambda: list(METHOD_TAGS))
    truth: GroundTruth = field(default_factory=GroundTruth)
    model: str = "exp-growth"
    options: MmOptions = field(default_factory=MmOptions)

    def validate(self) -> ModelSpec:
        """Check the config and return the instantiated model."""
        if self.nrep < 1:
            raise ValueError("nrep must be at least 1")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.model not in MODEL_REGISTRY:
            raise ValueError(
                f"unknown model {self.model!r}; known: {sorted(MODEL_REGISTRY)}"
            )
        model = MODEL_REGISTRY[self.model]()
        for tag in self.estimators:
            if tag not in METHOD_TAGS:
                raise ValueError(
                    f"unknown estimator tag {tag!r}; expected one of {METHOD_TAGS}"
                )
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        if not self.schemes:
            raise ValueError("at least one contamination scheme is required")
        names = [s.name for s in self.schemes]
        if len(set(names)) != len(names):
            raise ValueError(f"scheme names must be unique, got {names}")
        robust = set(self.estimators) - {"LS"}
        if robust and self.n < model.p + model.q + 2:
            raise ValueError(
                f"estimators {sorted(robust)} need n >= p+q+2 = {model.p + model.q + 2}"
            )
        if len(self.truth.beta) != model.p or len(self.truth.lam) != model.q:
            raise ValueError(
                f"truth dimensions ({len(self.truth.beta)}, {len(self.truth.lam)}) "
                f"do not match model (p={model.p}, q={model.q})"
            )
        return model

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "nrep": self.nrep,
            "master_seed": self.master_seed,
            "schemes": [vars(s) for s in self.schemes],
            "estimators": list(self.estimators),
            "truth": {
                "beta": list(self.truth.beta),
                "lambda": list(self.truth.lam),
                "sigma": self.truth.sigma,
            },
            "model": self.model,
            "options": {
                "c0": self.options.rho0.c,
                "c1": self.options.rho1.c,
                "b": self.options.b,
                "n_subsets": self.options.n_subsets,
                "max_irwls": self.options.max_irwls,
                "tol": self.options.tol,
            },
        }


def _beta_columns(p: int) -> list[str]:
    return [f"beta{j + 1}" for j in range(p)]


def _lambda_columns(q: int, prefix: str = "lambda") -> list[str]:
    return [prefix] if q == 1 else [f"{prefix}{j + 1}" for j in range(q)]


def _curve_parameters(fit: FitResult):
    """Scale and variance parameters defining a fit's variance curve."""
    lam = fit.lambda_refined if fit.lambda_refined is not None else fit.lam
    sigma = fit.sigma_refined if fit.sigma_refined is not None else fit.sigma
    if lam is None or sigma is None:
        return None
    return float(sigma), np.asarray(lam, dtype=float)


def _evaluate_curve(model: ModelSpec, fit: FitResult, grid: np.ndarray) -> np.ndarray:
    params = _curve_parameters(fit)
    beta = fit.beta if fit.beta is not None else fit.beta_ini
    if params is None or beta is None:
        return np.full(grid.shape[0], np.nan)
    sigma, lam = params
    H = np.asarray(model.h(grid, np.asarray(beta)), dtype=float).reshape(grid.shape[0], -1)
    with np.errstate(over="ignore"):
        curve = sigma * np.exp(H @ lam)
    curve[~np.isfinite(curve)] = np.nan
    return curve


# estimator groups that share pipeline stages within one fit call
_CALL_GROUPS = (("LS",), ("HLS",), ("MM", "HMM", "HMM_N"), ("WMM", "HWMM", "HWMM_N"))


def _run_cell(config: ExperimentConfig, scheme: ContaminationScheme, scheme_pos: int, rep: int):
    """Fit every requested estimator on one contaminated replication.

    Returns per-tag value rows, variance curves, and error notes.  Seeds
    derive from the master seed by counters: the clean sample depends only
    on the replication index (shared across schemes and estimators), the
    contamination jitter on (scheme position, replication), and the
    estimator subsets on the replication alone, so a zero-fraction scheme
    reproduces the clean-scheme results bit for bit.
    """
    model = MODEL_REGISTRY[config.model]()
    master = config.master_seed
    x, y = generate_sample(
        config.n, config.truth, np.random.SeedSequence([master, 0, rep]), model
    )
    x, y = apply_contamination(
        x, y, scheme, np.random.SeedSequence([master, 1, scheme_pos, rep])
    )
    rep_seed = int(np.random.SeedSequence([master, 2, rep]).generate_state(1)[0])
    options = replace(config.options, seed=rep_seed)

    rows: dict[str, dict[str, Any]] = {}
    curves: dict[str, np.ndarray] = {}
    errors: list[str] = []
    p, q = model.p, model.q
    beta_cols = _beta_columns(p)
    lam_cols = _lambda_columns(q)
    lam_ref_cols = _lambda_columns(q, "lambda_refined")

    for group in _CALL_GROUPS:
        tags = [t for t in group if t in config.estimators]
        if not tags:
            continue
        try:
            fits = fit_estimators(x, y, model, tags, options)
        except Exception as err:  # noqa: BLE001 - one bad replication must not kill the run
            errors.append(f"{scheme.name}/{'+'.join(tags)}/rep{rep}: {err}")
            fits = {}
        for tag in tags:
            fit = fits.get(tag) or FitResult(method=tag)
            row: dict[str, Any] = {
                "scheme": scheme.name,
                "estimator": tag,
                "replication": rep,
            }
            beta = fit.beta if fit.beta is not None else [np.nan] * p
            for col, v in zip(beta_cols, np.asarray(beta, dtype=float)):
                row[col] = float(v)
            lam = fit.lam if fit.lam is not None else [np.nan] * q
            for col, v in zip(lam_cols, np.asarray(lam, dtype=float)):
                row[col] = float(v)
            lam_ref = (
                fit.lambda_refined if fit.lambda_refined is not None else [np.nan] * q
            )
            for col, v in zip(lam_ref_cols, np.asarray(lam_ref, dtype=float)):
                row[col] = float(v)
            row["sigma"] = np.nan if fit.sigma is None else float(fit.sigma)
            row["converged"] = bool(fit.converged)
            rows[tag] = row
            if tag != "LS":
                curves[tag] = _evaluate_curve(model, fit, CURVE_GRID)
    return rows, curves, errors


@dataclass
class SimulationReport:
    """Per-replication estimates, variance-curve ensembles and summaries."""

    config: ExperimentConfig
    estimates: pd.DataFrame
    curves: dict[tuple[str, str], np.ndarray]
    x_grid: np.ndarray
    true_curve: np.ndarray
    meta: dict[str, Any]

    def summary(self) -> pd.DataFrame:
        """MSE, root-MSE and bias of each regression coefficient per
        (scheme, estimator).

        Replications whose regression estimate is missing or non-finite are
        excluded and counted; by construction ``mse >= bias**2`` on the
        included set.  ``rmse`` is reported alongside because published
        benchmark tables for this experiment are on the root scale.
        """
        model = MODEL_REGISTRY[self.config.model]()
        beta_cols = _beta_columns(model.p)
        truth = self.config.truth.beta_arr()
        out = []
        for scheme in [s.name for s in self.config.schemes]:
            for tag in self.config.estimators:
                cell = self.estimates[
                    (self.estimates["scheme"] == scheme)
                    & (self.estimates["estimator"] == tag)
                ]
                B = cell[beta_cols].to_numpy(dtype=float)
                included = np.all(np.isfinite(B), axis=1)
                n_inc = int(included.sum())
                for j, col in enumerate(beta_cols):
                    if n_inc:
                        dev = B[included, j] - truth[j]
                        mse = float(np.mean(dev * dev))
                        bias = float(np.mean(dev))
                    else:
                        mse = bias = np.nan
                    out.append(
                        {
                            "scheme": scheme,
                            "estimator": tag,
                            "parameter": col,
                            "mse": mse,
                            "rmse": float(np.sqrt(mse)),
                            "bias": bias,
                            "n_included": n_inc,
                            "n_excluded": len(cell) - n_inc,
                        }
                    )
        return pd.DataFrame(out)


def run_experiment(config: ExperimentConfig, n_jobs: int = 1) -> SimulationReport:
    """Run the full contamination experiment described by ``config``.

    Clean samples are shared across schemes and estimators (one per
    replication index), which reduces the variance of cross-estimator
    comparisons; all seeds derive from ``config.master_seed`` by counters,
    so results do not depend on execution order or the degree of
    parallelism.  ``n_jobs`` follows joblib conventions (1 = sequential,
    -1 = all cores).
    """
    model = config.validate()
    start_time = time.monotonic()
    tasks = [
        (scheme, pos, rep)
        for pos, scheme in enumerate(config.schemes)
        for rep in range(config.nrep)
    ]
    if n_jobs == 1:
        results = [_run_cell(config, s, pos, rep) for s, pos, rep in tasks]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_cell)(config, s, pos, rep) for s, pos, rep in tasks
        )

    records = []
    curve_store: dict[tuple[str, str], np.ndarray] = {
        (scheme.name, tag): np.full((config.nrep, CURVE_GRID.shape[0]), np.nan)
        for scheme in config.schemes
        for tag in config.estimators
        if tag != "LS"
    }
    errors: list[str] = []
    for (scheme, _pos, rep), (rows, curves, errs) in zip(tasks, results):
        errors.extend(errs)
        for tag in config.estimators:
            if tag in rows:
                records.append(rows[tag])
            if tag in curves:
                curve_store[(scheme.name, tag)][rep] = curves[tag]

    estimates = pd.DataFrame(records)
    H = np.asarray(model.h(CURVE_GRID, config.truth.beta_arr()), dtype=float)
    true_curve = config.truth.sigma * np.exp(H.reshape(len(CURVE_GRID), -1) @ config.truth.lam_arr())

    beta_cols = _beta_columns(model.p)
    exclusions = {}
    for scheme in config.schemes:
        for tag in config.estimators:
            cell = estimates[
                (estimates["scheme"] == scheme.name) & (estimates["estimator"] == tag)
            ]
            bad = int(
                config.nrep
                - np.all(np.isfinite(cell[beta_cols].to_numpy(dtype=float)), axis=1).sum()
            )
            if bad:
                exclusions[f"{scheme.name}/{tag}"] = bad

    meta = {
        "master_seed": config.master_seed,
        "clean_samples_shared": True,
        "exclusions": exclusions,
        "n_errors": len(errors),
        "error_sample": errors[:10],
        "wall_time_s": time.monotonic() - start_time,
    }
    return SimulationReport(
        config=config,
        estimates=estimates,
        curves=curve_store,
        x_grid=CURVE_GRID.copy(),
        true_curve=true_curve,
        meta=meta,
    )


def summarize_curves(report: SimulationReport, estimator: str, scheme: str) -> pd.DataFrame:
    """Pointwise quantile bands of the fitted variance curves.

    Per grid point: 2.5%/25%/50%/75%/97.5% quantiles over the replication
    ensemble (missing fits excluded), alongside the generating curve.
    """
    key = (scheme, estimator)
    if key not in report.curves:
        raise KeyError(f"no curve ensemble for scheme {scheme!r}, estimator {estimator!r}")
    ens = report.curves[key]
    if np.all(np.isnan(ens)):
        raise ValueError(f"curve ensemble for {scheme}/{estimator} is empty")
    qs = np.nanquantile(ens, [0.025, 0.25, 0.5, 0.75, 0.975], axis=0)
    return pd.DataFrame(
        {
            "x": report.x_grid,
            "q025": qs[0],
            "q25": qs[1],
            "median": qs[2],
            "q75": qs[3],
            "q975": qs[4],
            "true": report.true_curve,
        }
    )
