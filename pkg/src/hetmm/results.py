"""Shared fit-result container and estimator method tags."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = ["FitResult", "METHOD_TAGS"]

#: Recognized estimator tags.  LS/HLS are the classical baselines; MM/WMM
#: the robust fits computed as if the variance were constant; the H-variants
#: rescale by the estimated variance function, with the _N suffix marking
#: the log-residual-regression route to the variance parameters.
METHOD_TAGS = ("LS", "HLS", "MM", "WMM", "HMM", "HWMM", "HMM_N", "HWMM_N")


def _tolist(v):
    if v is None:
        return None
    arr = np.asarray(v, dtype=float)
    return arr.tolist() if arr.ndim else float(arr)


@dataclass
class FitResult:
    """Estimates and per-stage provenance of one model fit.

    ``beta_ini`` is the initial (variance-blind) fit and ``beta`` the final
    regression estimate; ``sigma``/``lam`` are the error scale and
    variance parameters from the joint estimation stage, and
    ``lambda_refined`` (plus ``sigma_refined`` where the method re-solves
    the scale) come from the log-residual refinement stage.  Stages that
    failed or were never reached leave their fields at None, with the cause
    recorded in ``diagnostics``.
    """

    method: str
    beta_ini: np.ndarray | None = None
    beta: np.ndarray | None = None
    sigma: float | None = None
    lam: np.ndarray | None = None
    lambda_refined: np.ndarray | None = None
    sigma_refined: float | None = None
    converged: bool = False
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        """True when the final regression estimate was produced and is finite."""
        return self.beta is not None and bool(np.all(np.isfinite(self.beta)))

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation (numpy arrays become lists)."""
        return {
            "method": self.method,
            "beta_ini": _tolist(self.beta_ini),
            "beta": _tolist(self.beta),
            "sigma": None if self.sigma is None else float(self.sigma),
            "lambda": _tolist(self.lam),
            "lambda_refined": _tolist(self.lambda_refined),
            "sigma_refined": None if self.sigma_refined is None else float(self.sigma_refined),
            "converged": bool(self.converged),
            "diagnostics": self.diagnostics,
        }
