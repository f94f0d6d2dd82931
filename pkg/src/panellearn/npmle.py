"""Simplex-constrained mixture-weight MLE: EM warm start, active-set Newton
refinement, and KKT certification.

The inner problem is max_{w in simplex} sum_i log( (Lw)_i ) for a likelihood
matrix L with nonnegative entries.  Optimality is certified through the
normalized first-order conditions g_s = (1/n) sum_i L_is/(Lw)_i <= 1, with
equality on the support; the dual vector is lambda = g - 1 <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .likelihood import DEN_FLOOR, LikelihoodMatrix

WEIGHT_TOL = 1e-10   # positivity threshold for the active support
KKT_TOL = 1e-8


@dataclass(frozen=True)
class GridMixture:
    """Support points and simplex weights: the sieve mixing distribution."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)
        if s.ndim != 1 or s.shape != w.shape:
            raise ValueError("support and weights must be 1-d arrays of equal length")
        if s.size > 1 and not np.all(np.diff(s) > 0):
            raise ValueError("support must be strictly increasing")
        if w.min() < 0 or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be nonnegative and sum to one")


@dataclass(frozen=True)
class InnerSolution:
    """Certified solution of the inner problem.

    objective is on the raw likelihood scale (row shifts added back);
    dual = g - 1 satisfies dual feasibility (<= tol) and complementary
    slackness with the weights when certified.
    """

    weights: np.ndarray
    dual: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    certified: bool


def _mean_ratio(Lt: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    den = np.maximum(Lt @ w, DEN_FLOOR)
    g = (Lt / den[:, None]).mean(axis=0)
    return g, den


def kkt_residual(L: LikelihoodMatrix, w: np.ndarray) -> float:
    """Normalized KKT residual: max over s of max(0, g_s - 1) or w_s*|g_s - 1|."""
    g, _ = _mean_ratio(L.shifted(), np.asarray(w, dtype=float))
    viol = np.maximum(0.0, g - 1.0)
    slack = np.abs(w * (g - 1.0))
    return float(np.maximum(viol, slack).max())


def _objective(Lt: np.ndarray, w: np.ndarray, shift_total: float) -> float:
    den = np.maximum(Lt @ w, DEN_FLOOR)
    return shift_total + float(np.log(den).sum())


def _newton_refine(Lt: np.ndarray, w: np.ndarray, shift_total: float,
                   max_steps: int = 40) -> tuple[np.ndarray, int]:
    """Equality-constrained Newton on the active support with step halving.

    Coordinates pushed to the boundary are dropped from the support; the
    bordered system is solved by least squares so duplicated columns (singular
    Hessians) degrade gracefully to a minimal-norm ascent step.
    """
    n = Lt.shape[0]
    w = w.copy()
    steps = 0
    for _ in range(max_steps):
        S = np.flatnonzero(w > WEIGHT_TOL)
        if S.size == 0:
            break
        LS = Lt[:, S]
        den = np.maximum(Lt @ w, DEN_FLOOR)
        r = 1.0 / den
        grad = LS.T @ r                       # (|S|,)
        if np.max(np.abs(grad / n - 1.0)) < 0.1 * KKT_TOL and S.size == np.sum(w > 0):
            break
        B = LS * r[:, None]
        hess = -(B.T @ B)                     # (|S|,|S|), negative semidefinite
        m = S.size
        sys = np.zeros((m + 1, m + 1))
        sys[:m, :m] = hess
        sys[:m, m] = 1.0
        sys[m, :m] = 1.0
        rhs = np.zeros(m + 1)
        rhs[:m] = -(grad - n)                 # stationarity target: grad = n on support
        sol, *_ = np.linalg.lstsq(sys, rhs, rcond=None)
        delta = sol[:m]
        if not np.all(np.isfinite(delta)) or np.abs(delta).max() < 1e-16:
            break
        # longest feasible step, then halve until the objective does not drop
        neg = delta < 0
        alpha = 1.0
        if neg.any():
            alpha = min(1.0, float(np.min(-w[S][neg] / delta[neg])))
        f0 = _objective(Lt, w, shift_total)
        improved = False
        for _ in range(30):
            trial = w.copy()
            trial[S] = np.maximum(w[S] + alpha * delta, 0.0)
            tot = trial.sum()
            if tot > 0:
                trial /= tot
                f1 = _objective(Lt, trial, shift_total)
                if f1 >= f0 - 1e-13 * max(1.0, abs(f0)):
                    w = trial
                    improved = True
                    break
            alpha *= 0.5
        steps += 1
        if not improved:
            break
    w[w <= WEIGHT_TOL * 1e-2] = 0.0
    tot = w.sum()
    if tot > 0:
        w /= tot
    return w, steps


def solve_weights(L: LikelihoodMatrix, tol: float = KKT_TOL,
                  warm_start: np.ndarray | None = None) -> InnerSolution:
    """Maximize the mixture log-likelihood over the unit simplex.

    EM sweeps (w <- w * g) from the uniform start, interleaved with
    second-order refinements on the running support; deterministic given L.
    Non-convergence within the sweep budget returns the best iterate flagged
    as non-certified, with its residual reported.
    """
    Lt = L.shifted()
    n, q = Lt.shape
    shift_total = float(L.row_shift.sum())
    if warm_start is not None:
        w = np.asarray(warm_start, dtype=float).copy()
        w = np.maximum(w, 0.0)
        w = w / w.sum() if w.sum() > 0 else np.full(q, 1.0 / q)
    else:
        w = np.full(q, 1.0 / q)

    max_em = 10 * q + 500
    em_done = 0
    newton_done = 0
    res = kkt_residual(L, w)
    chunk = 10
    while res > tol and em_done < max_em:
        for _ in range(chunk):
            g, _ = _mean_ratio(Lt, w)
            w = w * g
            w /= w.sum()
            em_done += 1
        w, steps = _newton_refine(Lt, w, shift_total)
        newton_done += steps
        g, _ = _mean_ratio(Lt, w)
        # EM is multiplicative, so weights zeroed by the refinement can never
        # re-enter on their own; reseed coordinates whose gradient demands mass
        bad = (w <= WEIGHT_TOL) & (g > 1.0 + tol)
        if bad.any():
            w = np.maximum(w, 0.0)
            w[bad] = 1e-4 / q
            w /= w.sum()
        res = kkt_residual(L, w)
        chunk = min(2 * chunk, 160)

    g, _ = _mean_ratio(Lt, w)
    return InnerSolution(
        weights=w,
        dual=g - 1.0,
        objective=_objective(Lt, w, shift_total),
        kkt_residual=res,
        iterations=em_done + newton_done,
        certified=bool(res <= tol),
    )


def em_sweep(L: LikelihoodMatrix, w: np.ndarray) -> np.ndarray:
    """One multiplicative EM update of the mixture weights."""
    g, _ = _mean_ratio(L.shifted(), np.asarray(w, dtype=float))
    out = w * g
    return out / out.sum()
