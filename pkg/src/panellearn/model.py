"""Domain types for the outcome/choice model and the Gaussian belief recursion.

Conventions used throughout the package: periods are 1-based (``t = 1..T``),
alternatives are 1-based (``d = 1..D``), and the underlying arrays are indexed
``[t-1, d-1]``.  The first covariate is the intercept.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


class InvalidStateError(ValueError):
    """A posterior state or parameter object violates its invariants."""


SIGMA2_FLOOR = 1e-12  # the belief update divides by sigma2


def _as_readonly(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


def _check_spd(mat: np.ndarray, name: str, tol: float = 1e-10) -> None:
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InvalidStateError(f"{name} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-10, rtol=1e-8):
        raise InvalidStateError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(mat)
    if eig.min() <= tol * max(1.0, eig.max()):
        raise InvalidStateError(f"{name} must be positive definite (eigs {eig})")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeParams:
    """Finite-dimensional outcome-equation parameters.

    beta[t-1, d-1] is the coefficient vector on the covariates (first entry is
    the intercept alpha), lambda_k / lambda_u are the loadings on the known and
    initially-unknown latent factors, sigma2 the transitory shock variance and
    sigma_u the (p x p) prior variance of the unknown factor.

    ``pinned`` records location/scale normalizations: entries listed there are
    never updated by the estimator.  Members are tuples
    ("beta", t, d, j) / ("lambda_k", t, d) / ("lambda_u", t, d, j).
    ``tie_sigma2`` makes the estimator use a single sigma2 per alternative,
    shared across periods.
    """

    beta: np.ndarray          # (T, D, k)
    lambda_k: np.ndarray      # (T, D)
    lambda_u: np.ndarray      # (T, D, p)
    sigma2: np.ndarray        # (T, D)
    sigma_u: np.ndarray       # (p, p) prior variance of X*_u
    pinned: frozenset = frozenset()
    tie_sigma2: bool = False

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_readonly(self.beta))
        object.__setattr__(self, "lambda_k", _as_readonly(self.lambda_k))
        object.__setattr__(self, "lambda_u", _as_readonly(self.lambda_u))
        object.__setattr__(self, "sigma2", _as_readonly(self.sigma2))
        object.__setattr__(self, "sigma_u", _as_readonly(np.atleast_2d(self.sigma_u)))
        if self.beta.ndim != 3:
            raise InvalidStateError("beta must have shape (T, D, k)")
        T, D, _ = self.beta.shape
        if self.lambda_k.shape != (T, D) or self.sigma2.shape != (T, D):
            raise InvalidStateError("lambda_k and sigma2 must have shape (T, D)")
        if self.lambda_u.shape[:2] != (T, D) or self.lambda_u.ndim != 3:
            raise InvalidStateError("lambda_u must have shape (T, D, p)")
        if self.sigma2.min() <= SIGMA2_FLOOR:
            raise InvalidStateError(f"sigma2 entries must exceed {SIGMA2_FLOOR}")
        _check_spd(self.sigma_u, "sigma_u")
        if self.sigma_u.shape[0] != self.p:
            raise InvalidStateError("sigma_u dimension must match lambda_u")

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    @property
    def D(self) -> int:
        return self.beta.shape[1]

    @property
    def k(self) -> int:
        return self.beta.shape[2]

    @property
    def p(self) -> int:
        return self.lambda_u.shape[2]

    def is_pinned(self, key: tuple) -> bool:
        return key in self.pinned


@dataclass(frozen=True)
class ChoiceParams:
    """Utility-scale and taste parameters of the parametric choice model.

    rho scales the systematic utility, kappa loads the known factor onto the
    alternative-2 taste shifter.  chi/delta form the optional risk-aversion
    block (curvature and belief bias) used only by the robustness simulator.
    """

    rho: float
    kappa: float
    chi: float | None = None
    delta: float | None = None

    def __post_init__(self):
        if self.rho < 0:
            raise InvalidStateError("rho must be nonnegative")


@dataclass(frozen=True)
class PosteriorState:
    """Gaussian belief N(mu, Sigma) over the unknown factor X*_u."""

    mu: np.ndarray     # (p,)
    Sigma: np.ndarray  # (p, p)

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_readonly(np.atleast_1d(self.mu)))
        object.__setattr__(self, "Sigma", _as_readonly(np.atleast_2d(self.Sigma)))

    def validate(self) -> None:
        _check_spd(self.Sigma, "Sigma")
        if self.mu.shape != (self.Sigma.shape[0],):
            raise InvalidStateError("mu and Sigma dimensions disagree")

    @property
    def p(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class Observation:
    """One period of data: outcome y, alternative d in {1..D}, covariates x."""

    y: float
    d: int
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _as_readonly(self.x))
        if self.d < 1:
            raise InvalidStateError(f"alternative index must be >= 1, got {self.d}")


class PanelData:
    """Balanced panel stored as arrays: y (n,T), d (n,T) in 1..D, x (n,T,k)."""

    def __init__(self, y, d, x):
        self.y = _as_readonly(y)
        self.d = _as_readonly(d, dtype=np.int64)
        self.x = _as_readonly(x)
        if self.y.ndim != 2 or self.d.shape != self.y.shape or self.x.ndim != 3:
            raise InvalidStateError("need y (n,T), d (n,T), x (n,T,k)")
        if self.x.shape[:2] != self.y.shape:
            raise InvalidStateError("x leading dimensions must match y")
        if self.d.min() < 1:
            raise InvalidStateError("alternative indices must be 1-based")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def k(self) -> int:
        return self.x.shape[2]

    @classmethod
    def from_individuals(cls, individuals: Sequence[Sequence[Observation]]) -> "PanelData":
        if not individuals:
            raise InvalidStateError("empty panel")
        T = len(individuals[0])
        k = individuals[0][0].x.shape[0]
        for seq in individuals:
            if len(seq) != T:
                raise InvalidStateError("all individuals must have exactly T periods")
            if any(obs.x.shape != (k,) for obs in seq):
                raise InvalidStateError("all covariate vectors must share one dimension")
        y = np.array([[obs.y for obs in seq] for seq in individuals])
        d = np.array([[obs.d for obs in seq] for seq in individuals])
        x = np.array([[obs.x for obs in seq] for seq in individuals])
        return cls(y, d, x)

    def individuals(self) -> Iterator[list[Observation]]:
        for i in range(self.n):
            yield [Observation(self.y[i, t], int(self.d[i, t]), self.x[i, t])
                   for t in range(self.T)]

    def individual(self, i: int) -> list[Observation]:
        return [Observation(self.y[i, t], int(self.d[i, t]), self.x[i, t])
                for t in range(self.T)]


# ---------------------------------------------------------------------------
# Belief recursion
# ---------------------------------------------------------------------------

def posterior_update(state: PosteriorState, y: float, x: np.ndarray, d: int,
                     xk: float, params: OutcomeParams, t: int) -> PosteriorState:
    """One-step conjugate update of the belief over X*_u after observing period t.

    Information-form update: the new precision adds lam lam^T / sigma2, the new
    mean shifts by the factor loading times the standardized outcome residual
    y - x'beta - xk*lam_k.  A zero loading returns the state unchanged, and the
    posterior variance never increases in the PSD order.
    """
    state.validate()
    ti, di = t - 1, d - 1
    lam = params.lambda_u[ti, di]
    sig2 = params.sigma2[ti, di]
    prec = np.linalg.inv(state.Sigma)
    new_prec = prec + np.outer(lam, lam) / sig2
    # symmetric factorization: p is tiny, solve via cholesky of the precision
    c = np.linalg.cholesky(new_prec)
    eye = np.eye(state.p)
    sigma_new = np.linalg.solve(c.T, np.linalg.solve(c, eye))
    sigma_new = 0.5 * (sigma_new + sigma_new.T)
    resid = y - float(x @ params.beta[ti, di]) - xk * params.lambda_k[ti, di]
    mu_new = sigma_new @ (prec @ state.mu + lam * resid / sig2)
    return PosteriorState(mu_new, sigma_new)


def prior_state(params: OutcomeParams) -> PosteriorState:
    return PosteriorState(np.zeros(params.p), params.sigma_u)


def posterior_path(history: Sequence[Observation], xk: float,
                   params: OutcomeParams) -> list[PosteriorState]:
    """Belief states entering periods 1..len(history)+1.

    Element t-1 of the returned list is the belief entering period t; the first
    element is the prior (0, sigma_u).
    """
    if len(history) > params.T:
        raise InvalidStateError("history longer than the model horizon")
    states = [prior_state(params)]
    for t, obs in enumerate(history, start=1):
        states.append(posterior_update(states[-1], obs.y, obs.x, obs.d, xk, params, t))
    return states


def conditional_outcome_moments(state: PosteriorState, x: np.ndarray, d: int,
                                xk: float, params: OutcomeParams,
                                t: int) -> tuple[float, float]:
    """Mean and variance of Y_t(d) given the current belief and known factor."""
    state.validate()
    ti, di = t - 1, d - 1
    lam = params.lambda_u[ti, di]
    mean = float(x @ params.beta[ti, di]) + xk * params.lambda_k[ti, di] \
        + float(state.mu @ lam)
    var = float(lam @ state.Sigma @ lam) + params.sigma2[ti, di]
    return mean, var
