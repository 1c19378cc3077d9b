"""Robust stepwise estimation for heteroscedastic nonlinear regression.

The package provides bounded-loss kernels, M-scale solvers, classical and
robust (MM) regression fits, stepwise pipelines that also estimate a
parametric variance function, and a contamination Monte Carlo harness with
CSV/figure reporting.
"""

from .kernels import BisquareRho, RobustLocationScale, median_mad
from .mm import LinearMmFit, MmFit, MmOptions, linear_mm, nonlinear_mm
from .models import (
    ModelSpec,
    VarianceOverflowError,
    exponential_experiment_model,
    residuals,
    upsilon,
)
from .nls import LsFit, nonlinear_ls, weighted_ls_pipeline
from .pipelines import (
    bisquare_leverage_weights,
    fit_classical,
    fit_estimators,
    fit_method,
    fit_stepwise,
    fit_stepwise_n,
)
from .results import METHOD_TAGS, FitResult
from .scales import (
    DegenerateScaleError,
    MScaleSpec,
    SigmaLambdaEstimate,
    m_scale,
    solve_sigma_lambda,
)
from .simulate import (
    ContaminationScheme,
    ExperimentConfig,
    GroundTruth,
    NAMED_SCHEMES,
    SimulationReport,
    apply_contamination,
    generate_sample,
    run_experiment,
    summarize_curves,
)

__version__ = "0.1.0"

__all__ = [
    "BisquareRho",
    "RobustLocationScale",
    "median_mad",
    "MScaleSpec",
    "DegenerateScaleError",
    "m_scale",
    "solve_sigma_lambda",
    "SigmaLambdaEstimate",
    "ModelSpec",
    "VarianceOverflowError",
    "exponential_experiment_model",
    "upsilon",
    "residuals",
    "LsFit",
    "nonlinear_ls",
    "weighted_ls_pipeline",
    "MmOptions",
    "MmFit",
    "LinearMmFit",
    "linear_mm",
    "nonlinear_mm",
    "FitResult",
    "METHOD_TAGS",
    "fit_stepwise",
    "fit_stepwise_n",
    "fit_classical",
    "fit_method",
    "fit_estimators",
    "bisquare_leverage_weights",
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
