"""Profile log-likelihood over the structural parameters: value, gradient via
the envelope shortcut, and the implicit Jacobian of the inner argmax.

The profiled objective is lp(theta) = sum_i log sum_s w_s(theta) lc_is(theta)
with w(theta) the inner simplex maximizer.  Because w(theta) is optimal, the
chain-rule term through w vanishes (its directional derivatives are tangent to
the simplex where the objective is flat), so differentiating at fixed w -- the
envelope route -- equals the full implicit-differentiation route; both are
implemented and cross-checked.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .likelihood import DEN_FLOOR, LikelihoodEngine, LikelihoodMatrix, loglik_matrix
from .model import ChoiceParams, OutcomeParams, PanelData
from .npmle import WEIGHT_TOL, InnerSolution, solve_weights
from .packing import ParamPacker

STRICT_COMPLEMENTARITY_TOL = 1e-7


class DegenerateKktError(ValueError):
    """The reduced KKT system is numerically singular."""


class BoundaryKinkError(ValueError):
    """Strict complementarity fails: a boundary weight has a vanishing dual."""


@dataclass(frozen=True)
class ProfileEval:
    """Profile log-likelihood value (raw sum scale) and the inner solution."""

    value: float
    inner: InnerSolution
    gradient: np.ndarray | None = None


def profile_value(outcome: OutcomeParams, choice: ChoiceParams, data: PanelData,
                  support: np.ndarray, warm_start: np.ndarray | None = None,
                  L: LikelihoodMatrix | None = None) -> ProfileEval:
    """Maximize the mixture weights at fixed structural parameters."""
    if L is None:
        L = loglik_matrix(data, support, outcome, choice)
    inner = solve_weights(L, warm_start=warm_start)
    return ProfileEval(value=inner.objective, inner=inner)


def _responsibilities(L: LikelihoodMatrix, w: np.ndarray) -> np.ndarray:
    Lt = L.shifted()
    den = np.maximum(Lt @ w, DEN_FLOOR)
    return (Lt * w[None, :]) / den[:, None]


def profile_gradient(outcome: OutcomeParams, choice: ChoiceParams, data: PanelData,
                     support: np.ndarray, method: str = "envelope",
                     evaluation: ProfileEval | None = None,
                     packer: ParamPacker | None = None) -> np.ndarray:
    """Gradient of the profile log-likelihood over the free coordinates.

    method "envelope" differentiates at the fixed inner optimum; "implicit"
    adds the chain-rule term through the weight Jacobian (zero in exact
    arithmetic, kept as a cross-check).  Both are on the raw sum scale,
    matching profile_value.
    """
    packer = packer or ParamPacker(outcome, choice)
    engine = LikelihoodEngine(data, support, outcome, choice)
    if evaluation is None:
        L = LikelihoodMatrix.from_raw(engine.raw_matrix())
        evaluation = profile_value(outcome, choice, data, support, L=L)
    else:
        L = loglik_matrix(data, support, outcome, choice)
    inner = evaluation.inner
    if not inner.certified:
        warnings.warn("inner solution not certified; gradient is approximate",
                      RuntimeWarning)
    R = _responsibilities(L, inner.weights)
    g_full = engine.contract_gradient(R)
    grad = packer.gradient_to_free(g_full, outcome, choice)
    if method == "envelope":
        return grad
    if method != "implicit":
        raise ValueError(f"unknown gradient method {method!r}")
    J = weight_jacobian(outcome, choice, data, support, inner,
                        packer=packer, L=L, engine=engine)
    Lt = L.shifted()
    den = np.maximum(Lt @ inner.weights, DEN_FLOOR)
    dldw = (Lt / den[:, None]).sum(axis=0)          # d lp / d w_s at fixed theta
    return grad + J.T @ dldw


def _free_chain(packer: ParamPacker, outcome: OutcomeParams,
                choice: ChoiceParams) -> list[list[tuple[int, float]]]:
    """Per free coordinate: the (full index, chain scale) pairs that feed it."""
    full_vals = packer.full_values(outcome, choice)
    chain = []
    for c in packer.free:
        if c.transform == "log":
            chain.append([(fi, float(full_vals[fi])) for fi in c.full_indices])
        else:
            chain.append([(fi, 1.0) for fi in c.full_indices])
    return chain


def weight_jacobian(outcome: OutcomeParams, choice: ChoiceParams, data: PanelData,
                    support: np.ndarray, inner: InnerSolution,
                    packer: ParamPacker | None = None,
                    L: LikelihoodMatrix | None = None,
                    engine: LikelihoodEngine | None = None) -> np.ndarray:
    """q x dim Jacobian of the inner argmax w(theta), free coordinates.

    Differentiates the stationarity system on the active support: the block
    system [[H, I], [diag(dual), diag(w)]] (H the normalized likelihood
    curvature sum_i l_i l_i'/(w'l_i)^2 / n) against the theta-derivative block,
    solved by LU with sub-threshold weights dropped first.  Requires a
    certified solution with strict complementarity.
    """
    if not inner.certified:
        raise BoundaryKinkError("inner solution is not certified")
    packer = packer or ParamPacker(outcome, choice)
    engine = engine or LikelihoodEngine(data, support, outcome, choice)
    if L is None:
        L = LikelihoodMatrix.from_raw(engine.raw_matrix())
    w, lam = inner.weights, inner.dual
    q = w.size
    S = np.flatnonzero(w > WEIGHT_TOL)
    off = np.setdiff1d(np.arange(q), S)
    if off.size and np.any(lam[off] >= -STRICT_COMPLEMENTARITY_TOL):
        raise BoundaryKinkError(
            "strict complementarity fails: zero weight with vanishing dual")
    n = L.n
    Lt = L.shifted()
    den = np.maximum(Lt @ w, DEN_FLOOR)
    LS = Lt[:, S]
    B = LS / den[:, None]
    m = S.size
    G1 = np.zeros((2 * m, 2 * m))
    G1[:m, :m] = (B.T @ B) / n
    G1[:m, m:] = np.eye(m)
    G1[m:, :m] = np.diag(lam[S])
    G1[m:, m:] = np.diag(w[S])
    cond = np.linalg.cond(G1)
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateKktError(f"reduced KKT system is ill-conditioned ({cond:.2e})")

    chain = _free_chain(packer, outcome, choice)
    dim = packer.dim
    term1 = np.zeros((m, dim))
    term2 = np.zeros((m, dim))
    inv_den = 1.0 / den
    inv_den2 = inv_den ** 2
    for rows, blocks in engine.gradient_blocks():
        Lg = Lt[rows]
        LgS = Lg[:, S]
        r1 = inv_den[rows]
        r2 = inv_den2[rows]
        for j, pairs in enumerate(chain):
            D = None
            for fi, scale in pairs:
                if fi in blocks:
                    D = blocks[fi] * scale if D is None else D + blocks[fi] * scale
            if D is None:
                continue
            E = Lg * D
            term1[:, j] += (E[:, S].T @ r1)
            C = E @ w
            term2[:, j] += LgS.T @ (C * r2)
    G2 = np.zeros((2 * m, dim))
    G2[:m] = -(term1 - term2) / n
    sol = np.linalg.solve(G1, -G2)
    J = np.zeros((q, dim))
    J[S] = sol[:m]
    return J
