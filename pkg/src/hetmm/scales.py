"""M-scale root finding and the joint error-scale / variance-parameter solver.

The M-scale of a residual vector is the ``sigma`` solving

    mean( rho0(r_i / sigma) ) = b,

a robust stand-in for the residual standard deviation with breakdown point
``min(b, 1-b)``.  ``solve_sigma_lambda`` extends this to the simultaneous
system that also drives the centered estimating equation for the
variance-function parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import BISQUARE_C_SCALE, BisquareRho

__all__ = [
    "MScaleSpec",
    "SigmaLambdaEstimate",
    "DegenerateScaleError",
    "ScaleBracketError",
    "m_scale",
    "m_scale_batch",
    "m_scale_best_row",
    "solve_sigma_lambda",
]

_REL_TOL = 1e-12
_MAX_EXPAND = 80
_MAX_BISECT = 200


class DegenerateScaleError(ValueError):
    """Raised when the M-scale equation has no positive root (e.g. the
    residuals are all zero, or too many are zero for the breakdown target)."""


class ScaleBracketError(RuntimeError):
    """Raised when no sign change can be bracketed after geometric expansion."""


def _mean_rho_minus_b(r_abs: np.ndarray, s, w: np.ndarray, wsum: float, c: float, b: float):
    """Weighted mean of the bisquare loss at scale ``s``, minus ``b``.

    Works on a 1-d residual vector with scalar ``s`` or on a matrix of
    residual rows with one scale per row.  Uses the identity
    ``mean(rho) = 1 - mean((1 - min((r/(c s))^2, 1))^3)`` with in-place
    temporaries; this is the innermost loop of every scale solve.
    """
    with np.errstate(over="ignore"):
        if r_abs.ndim == 2:
            U = r_abs / (c * np.asarray(s))[:, None]
        else:
            U = r_abs / (c * s)
        np.multiply(U, U, out=U)
    np.minimum(U, 1.0, out=U)
    np.subtract(1.0, U, out=U)
    T3 = U * U
    np.multiply(T3, U, out=T3)
    return (1.0 - (T3 @ w) / wsum) - b


@dataclass(frozen=True)
class MScaleSpec:
    """Loss and breakdown target defining an M-scale.

    With the sup-normalized bisquare and ``b = 0.5`` the default tuning
    constant gives a Fisher-consistent scale under normal errors with 50%
    breakdown point.
    """

    rho0: BisquareRho = field(default_factory=lambda: BisquareRho(BISQUARE_C_SCALE))
    b: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.b < 1.0:
            raise ValueError(f"breakdown target b must lie in (0, 1), got {self.b}")


def _check_weights(r: np.ndarray, weights) -> np.ndarray:
    if weights is None:
        return np.ones_like(r)
    w = np.asarray(weights, dtype=float)
    if w.shape != r.shape:
        raise ValueError(f"weights shape {w.shape} does not match residuals {r.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise ValueError("weights sum to zero")
    return w


def m_scale(residuals, spec: MScaleSpec | None = None, weights=None) -> float:
    """Solve ``sum(w * rho0(r/sigma)) / sum(w) = b`` for ``sigma > 0``.

    Bracket-then-bisect on the strictly monotone map; the initial bracket
    comes from the median absolute residual with geometric expansion by
    factors of 10, and bisection runs to relative tolerance 1e-12, which
    leaves the equation residual below 1e-10.

    Parameters
    ----------
    residuals : array_like
        Residual vector with at least one nonzero entry.
    spec : MScaleSpec, optional
        Loss and breakdown target; defaults to the 50%-breakdown bisquare.
    weights : array_like, optional
        Nonnegative per-observation weights (the unweighted scale uses
        implicit unit weights and the identical code path).

    Raises
    ------
    DegenerateScaleError
        If all residuals are zero, or the weight fraction on zero residuals
        reaches ``1 - b`` so that no positive root exists.
    ScaleBracketError
        If no sign change is found after expansion (diagnostic payload in
        the message).
    """
    spec = spec or MScaleSpec()
    r = np.abs(np.asarray(residuals, dtype=float))
    if r.ndim != 1 or r.size == 0:
        raise ValueError("residuals must be a non-empty 1-d vector")
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals contain non-finite values")
    w = _check_weights(r, weights)
    wsum = float(w.sum())

    nonzero = r > 0.0
    if not nonzero.any():
        raise DegenerateScaleError("all residuals are zero; scale is degenerate")
    if float(w[nonzero].sum()) / wsum <= spec.b:
        raise DegenerateScaleError(
            "weight fraction of zero residuals reaches 1 - b; no positive root"
        )

    c = spec.rho0.c

    def excess(s: float) -> float:
        return float(_mean_rho_minus_b(r, s, w, wsum, c, spec.b))

    s0 = float(np.median(r))
    if s0 <= 0.0:
        s0 = float(np.mean(r[nonzero]))

    lo = hi = s0
    f0 = excess(s0)
    if f0 > 0.0:
        # sigma too small: expand upward until the mean loss drops below b
        for _ in range(_MAX_EXPAND):
            lo, hi = hi, hi * 10.0
            if excess(hi) <= 0.0:
                break
        else:
            raise ScaleBracketError(
                f"no upper bracket after {_MAX_EXPAND} expansions from {s0!r}"
            )
    elif f0 < 0.0:
        for _ in range(_MAX_EXPAND):
            hi, lo = lo, lo / 10.0
            if excess(lo) >= 0.0:
                break
        else:
            raise ScaleBracketError(
                f"no lower bracket after {_MAX_EXPAND} expansions from {s0!r}"
            )
    else:
        return s0

    for _ in range(_MAX_BISECT):
        if hi - lo <= _REL_TOL * hi:
            break
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _classify_rows(R: np.ndarray, w: np.ndarray, wsum: float, b: float):
    """Split rows into non-finite, degenerate (scale 0) and solvable."""
    finite = np.all(np.isfinite(R), axis=1)
    frac_nonzero = (R > 0.0) @ w / wsum
    degenerate = finite & (frac_nonzero <= b)
    return finite, degenerate, finite & ~degenerate


def _bisect_rows(A: np.ndarray, w: np.ndarray, wsum: float, spec: MScaleSpec, prune: bool):
    """Bracket and bisect the M-scale of every row of ``A`` (all solvable).

    With ``prune`` True, rows whose lower bracket already exceeds the
    smallest upper bracket are dropped as the iteration proceeds; they can
    never attain the minimum, so the surviving argmin is exact.  Returns
    ``(row_indices, scales)`` for the rows still present at the end.
    """
    c = spec.rho0.c
    idx = np.arange(A.shape[0])

    s0 = np.median(A, axis=1)
    fallback = s0 <= 0.0
    if fallback.any():
        masked = np.where(A[fallback] > 0.0, A[fallback], np.nan)
        s0[fallback] = np.nanmean(masked, axis=1)

    lo = s0.copy()
    hi = s0.copy()
    f0 = _mean_rho_minus_b(A, s0, w, wsum, c, spec.b)
    need_up = f0 > 0.0
    need_down = f0 < 0.0
    for _ in range(_MAX_EXPAND):
        if not (need_up.any() or need_down.any()):
            break
        lo[need_up] = hi[need_up]
        hi[need_up] *= 10.0
        hi[need_down] = lo[need_down]
        lo[need_down] /= 10.0
        probe = np.where(need_up, hi, np.where(need_down, lo, s0))
        f = _mean_rho_minus_b(A, probe, w, wsum, c, spec.b)
        need_up &= f > 0.0
        need_down &= f < 0.0
    else:
        raise ScaleBracketError("batch bracket expansion failed to terminate")

    for _ in range(_MAX_BISECT):
        if prune and idx.size > 1:
            keep = lo <= hi.min()
            if not keep.all():
                idx, A, lo, hi = idx[keep], A[keep], lo[keep], hi[keep]
        open_rows = (hi - lo) > _REL_TOL * hi
        if not open_rows.any():
            break
        mid = 0.5 * (lo + hi)
        f = _mean_rho_minus_b(A, mid, w, wsum, c, spec.b)
        take_lo = open_rows & (f > 0.0)
        take_hi = open_rows & ~take_lo
        lo[take_lo] = mid[take_lo]
        hi[take_hi] = mid[take_hi]

    return idx, 0.5 * (lo + hi)


def m_scale_batch(
    residual_rows: np.ndarray, spec: MScaleSpec | None = None, weights=None
) -> np.ndarray:
    """Vectorized M-scale over the rows of a residual matrix.

    Rows with non-finite entries score ``inf``; rows whose weight fraction
    of nonzero residuals does not exceed ``b`` score 0 (such a candidate
    fits more than the breakdown fraction of the data exactly, so its
    M-scale degenerates to 0).
    """
    spec = spec or MScaleSpec()
    R = np.abs(np.asarray(residual_rows, dtype=float))
    if R.ndim != 2:
        raise ValueError("residual_rows must be a 2-d matrix")
    m, n = R.shape
    w = _check_weights(R[0], weights) if m else np.ones(n)
    wsum = float(w.sum())

    out = np.full(m, np.inf)
    _, degenerate, active = _classify_rows(R, w, wsum, spec.b)
    out[degenerate] = 0.0
    if active.any():
        rows = np.flatnonzero(active)
        sub_idx, scales = _bisect_rows(R[rows], w, wsum, spec, prune=False)
        out[rows[sub_idx]] = scales
    return out


def m_scale_best_row(
    residual_rows: np.ndarray, spec: MScaleSpec | None = None, weights=None
) -> tuple[int, float]:
    """Index and M-scale of the row with the smallest scale.

    Equivalent to ``argmin(m_scale_batch(...))`` with first-index
    tie-breaking, but prunes rows that provably cannot attain the minimum,
    which makes candidate scoring cheap.  Degenerate rows (scale 0) win
    immediately; if every row is non-finite the result is ``(-1, inf)``.
    """
    spec = spec or MScaleSpec()
    R = np.abs(np.asarray(residual_rows, dtype=float))
    if R.ndim != 2:
        raise ValueError("residual_rows must be a 2-d matrix")
    w = _check_weights(R[0], weights)
    wsum = float(w.sum())

    finite, degenerate, active = _classify_rows(R, w, wsum, spec.b)
    if degenerate.any():
        return int(np.argmax(degenerate)), 0.0
    if not active.any():
        return -1, np.inf
    rows = np.flatnonzero(active)
    sub_idx, scales = _bisect_rows(R[rows], w, wsum, spec, prune=True)
    j = int(np.argmin(scales))
    return int(rows[sub_idx[j]]), float(scales[j])


@dataclass
class SigmaLambdaEstimate:
    """Joint estimate of the error scale and variance-function parameters."""

    sigma: float
    lam: np.ndarray
    converged: bool
    iterations: int
    final_residual_norm: float


_NEWTON_MAX_STEPS = 100
_NEWTON_MAX_HALVINGS = 20
_FD_STEP = 1e-6
_SYSTEM_TOL = 1e-8


def _moment_lambda_start(raw_residuals: np.ndarray, h_mat: np.ndarray) -> np.ndarray:
    """Least-squares slope of log absolute residuals on the variance covariates."""
    z = np.log(np.maximum(np.abs(raw_residuals), 1e-12))
    X = np.column_stack([np.ones(h_mat.shape[0]), h_mat])
    coef, *_ = np.linalg.lstsq(X, z, rcond=None)
    return coef[1:]


def solve_sigma_lambda(
    x,
    y,
    beta,
    model,
    spec: MScaleSpec | None = None,
    w2=None,
    extra_starts=(),
) -> SigmaLambdaEstimate:
    """Solve the coupled scale / variance-parameter estimating equations.

    With ``r_i(lam) = (y_i - g(x_i, beta)) / exp(lam . h_i)`` and
    ``chi(u) = rho0(u) - b``, find ``(sigma, lam)`` such that

        mean( chi(r_i/sigma) )                 = 0
        mean( chi(r_i/sigma) * w2_i * h_i )    = 0   (componentwise)

    The structure is nested: for each trial ``lam`` the inner equation is
    solved exactly by ``m_scale``, and the outer q-dimensional equation is
    driven to zero by damped Newton with a forward-difference Jacobian,
    multistarted from zero, a log-residual moment fit, and any
    ``extra_starts``.  The start reaching the smallest stacked-system norm
    wins; ties break on the smaller ``|lam|``, then start order.

    ``w2`` may be a per-observation weight vector, a callable mapping the
    ``(n, q)`` variance-covariate matrix to weights, or None for unit
    weights.
    """
    spec = spec or MScaleSpec()
    x = np.asarray(x)
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = y.shape[0]
    q = model.q
    if n <= q + 1:
        raise ValueError(f"need more than q+1 = {q + 1} observations, got {n}")

    e = y - np.asarray(model.g(x, beta), dtype=float)
    if not np.any(e != 0.0):
        raise DegenerateScaleError("model residuals are all zero")
    H = np.asarray(model.h(x, beta), dtype=float).reshape(n, q)

    if w2 is None:
        wts = np.ones(n)
    elif callable(w2):
        wts = np.asarray(w2(H), dtype=float)
    else:
        wts = np.asarray(w2, dtype=float)
    if wts.shape != (n,):
        raise ValueError("w2 must produce one weight per observation")

    def system(lam: np.ndarray) -> tuple[np.ndarray, float, float]:
        """Return (outer equation vector, sigma(lam), stacked max-norm)."""
        expo = H @ lam
        if np.max(expo) > 700.0:
            return np.full(q, np.inf), np.nan, np.inf
        with np.errstate(over="ignore", divide="ignore"):
            r = e / np.exp(expo)
        if not np.all(np.isfinite(r)):
            return np.full(q, np.inf), np.nan, np.inf
        sigma = m_scale(r, spec)
        chi = spec.rho0.rho(r / sigma) - spec.b
        inner = float(np.mean(chi))
        outer = (chi * wts) @ H / n
        norm = max(abs(inner), float(np.max(np.abs(outer))))
        return outer, sigma, norm

    starts = [np.zeros(q), _moment_lambda_start(e, H)]
    starts.extend(np.asarray(s, dtype=float).reshape(q) for s in extra_starts)

    best = None  # (norm, |lam|, start_idx) -> lam, sigma, iterations, converged
    for start_idx, lam0 in enumerate(starts):
        lam = lam0.copy()
        try:
            F, sigma, norm = system(lam)
        except DegenerateScaleError:
            continue
        if not np.isfinite(norm):
            continue
        iterations = 0
        for iterations in range(1, _NEWTON_MAX_STEPS + 1):
            if norm <= _SYSTEM_TOL:
                break
            J = np.empty((q, q))
            broken = False
            for j in range(q):
                bumped = lam.copy()
                bumped[j] += _FD_STEP
                Fj, _, norm_j = system(bumped)
                if not np.isfinite(norm_j):
                    broken = True
                    break
                J[:, j] = (Fj - F) / _FD_STEP
            if broken:
                break
            try:
                step = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                break
            alpha = 1.0
            improved = False
            for _ in range(_NEWTON_MAX_HALVINGS):
                trial = lam + alpha * step
                F_t, sigma_t, norm_t = system(trial)
                if np.isfinite(norm_t) and norm_t < norm:
                    lam, F, sigma, norm = trial, F_t, sigma_t, norm_t
                    improved = True
                    break
                alpha *= 0.5
            if not improved:
                break
        converged = norm <= _SYSTEM_TOL
        key = (norm, float(np.linalg.norm(lam)), start_idx)
        if best is None or key < best[0]:
            best = (key, lam, sigma, iterations, converged)

    if best is None:
        raise DegenerateScaleError(
            "every start of the sigma/lambda system was degenerate or overflowed"
        )
    key, lam, sigma, iterations, converged = best
    return SigmaLambdaEstimate(
        sigma=float(sigma),
        lam=lam,
        converged=bool(converged),
        iterations=int(iterations),
        final_residual_norm=float(key[0]),
    )
