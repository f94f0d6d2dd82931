"""Data-generating processes: logit expected-utility choices and the
truncated-normal-mixture known factor, plus the risk-averse variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .model import (ChoiceParams, InvalidStateError, OutcomeParams, PanelData,
                    PosteriorState, conditional_outcome_moments)


class UnsupportedParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Known-factor distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureSpec:
    """Finite mixture of normals, each truncated at +- trunc_mult std devs."""

    means: np.ndarray = field(default_factory=lambda: np.array([-1.2, 0.0, 1.5]))
    variances: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.1, 0.3]))
    weights: np.ndarray = field(default_factory=lambda: np.array([0.4, 0.3, 0.3]))
    trunc_mult: float = 3.0

    def __post_init__(self):
        m = np.asarray(self.means, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "weights", w)
        if not (m.shape == v.shape == w.shape):
            raise InvalidStateError("mixture component vectors must share a length")
        if v.min() <= 0:
            raise InvalidStateError("component variances must be positive")
        if w.min() < 0 or abs(w.sum() - 1.0) > 1e-10:
            raise InvalidStateError("weights must lie on the simplex")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        sd = np.sqrt(self.variances)
        return self.means - self.trunc_mult * sd, self.means + self.trunc_mult * sd

    def moments(self) -> tuple[float, float]:
        """Exact mean and variance of the truncated mixture.

        Symmetric +-c*sd truncation keeps the component mean and shrinks the
        component variance by 1 - 2c*phi(c)/(2*Phi(c)-1).
        """
        c = self.trunc_mult
        shrink = 1.0 - 2.0 * c * norm.pdf(c) / (2.0 * norm.cdf(c) - 1.0)
        mean = float(self.weights @ self.means)
        second = float(self.weights @ (self.means ** 2 + shrink * self.variances))
        return mean, second - mean ** 2

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        sd = np.sqrt(self.variances)
        c = self.trunc_mult
        z = (x[..., None] - self.means) / sd
        comp = (norm.cdf(np.clip(z, -c, c)) - norm.cdf(-c)) / (2.0 * norm.cdf(c) - 1.0)
        return comp @ self.weights

    def quantile(self, alpha: float) -> float:
        """Inverse CDF by bisection over the union of the component supports."""
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        lo_b, hi_b = self.bounds
        lo, hi = float(lo_b.min()), float(hi_b.max())
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if float(self.cdf(mid)) < alpha:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def sample_xk(rng: np.random.Generator, spec: MixtureSpec, size: int = 1) -> np.ndarray:
    """Draw from the truncated-normal mixture (inverse-CDF within each interval)."""
    comp = rng.choice(len(spec.weights), size=size, p=spec.weights)
    sd = np.sqrt(spec.variances[comp])
    c = spec.trunc_mult
    u = rng.uniform(size=size)
    lo, hi = norm.cdf(-c), norm.cdf(c)
    z = norm.ppf(lo + u * (hi - lo))
    return spec.means[comp] + sd * z


# ---------------------------------------------------------------------------
# Choice probabilities
# ---------------------------------------------------------------------------

def _softmax_choice(v: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; for two alternatives the pair sums to one
    exactly (the second probability is computed as a complement)."""
    if v.shape[-1] == 2:
        p2 = 1.0 / (1.0 + np.exp(np.clip(v[..., 0] - v[..., 1], -700.0, 700.0)))
        return np.stack([1.0 - p2, p2], axis=-1)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    p[..., -1] = np.clip(1.0 - p[..., :-1].sum(axis=-1), 0.0, 1.0)
    return p


def ccp(state: PosteriorState, x: np.ndarray, xk: float, t: int,
        outcome: OutcomeParams, choice: ChoiceParams) -> np.ndarray:
    """Choice probabilities over the D alternatives at period t.

    Systematic utility: rho * E(Y_t(d) | belief, x, xk) plus the taste shifter
    rho*kappa*xk on alternative 2; EV1 preference shocks give the softmax.
    """
    v = np.empty(outcome.D)
    for d in range(1, outcome.D + 1):
        mean, _ = conditional_outcome_moments(state, x, d, xk, outcome, t)
        v[d - 1] = choice.rho * (mean + (choice.kappa * xk if d == 2 else 0.0))
    return _softmax_choice(v)


def crra_utility(mean_log: float, var_log: float, chi: float) -> float:
    """Expected CRRA utility of a lognormal outcome with the given log moments."""
    if chi == 1.0:
        raise UnsupportedParameterError("chi = 1 (log-utility limit) is not supported")
    return float(np.exp(mean_log * (1.0 - chi) + 0.5 * var_log * (1.0 - chi) ** 2)
                 / (1.0 - chi))


def ccp_crra(state: PosteriorState, x: np.ndarray, xk: float, t: int,
             outcome: OutcomeParams, choice: ChoiceParams) -> np.ndarray:
    """Risk-averse choice probabilities with possibly biased beliefs.

    The linear model is read as the log outcome; the agent's subjective belief
    over X*_u is N(mu_t + delta*xk, Sigma_t), so the subjective log-outcome
    moments come from the conditional moments evaluated at the shifted mean.
    The subjective variance includes the transitory shock variance.
    """
    if choice.chi is None:
        raise UnsupportedParameterError("choice parameters carry no risk-aversion block")
    delta = choice.kappa if choice.delta is None else choice.delta
    biased = PosteriorState(state.mu + delta * xk, state.Sigma)
    v = np.empty(outcome.D)
    for d in range(1, outcome.D + 1):
        mean, var = conditional_outcome_moments(biased, x, d, xk, outcome, t)
        v[d - 1] = crra_utility(mean, var, choice.chi)
    return _softmax_choice(v)


# ---------------------------------------------------------------------------
# DGP configuration
# ---------------------------------------------------------------------------

def default_outcome_params() -> OutcomeParams:
    """Benchmark 3-period, 2-alternative outcome parameters (p = 1).

    Covariates are (1, x1, x2); alpha_{1,1}, lambda_u_{1,1} and lambda_k_{1,2}
    are the pinned normalization entries.
    """
    beta = np.array([
        [[0.0, -0.5, -0.58], [-0.1, 0.13, 0.71]],
        [[0.1, -0.8, -0.83], [-0.22, 0.89, -0.36]],
        [[0.2, 0.12, -0.83], [-0.33, 0.32, -0.36]],
    ])
    lambda_k = np.array([[0.3, 1.0], [0.35, 1.05], [0.33, 1.02]])
    lambda_u = np.array([[[1.0], [0.4]], [[1.05], [0.36]], [[1.01], [0.44]]])
    sigma2 = np.array([[0.5, 0.7]] * 3)
    pinned = frozenset({("beta", 1, 1, 0), ("lambda_u", 1, 1, 0), ("lambda_k", 1, 2)})
    return OutcomeParams(beta, lambda_k, lambda_u, sigma2, np.array([[1.5]]),
                         pinned=pinned, tie_sigma2=True)


@dataclass(frozen=True)
class DgpConfig:
    """Simulation design: outcome/choice parameters, known-factor mixture, seed.

    Covariates are (intercept, X1, X2) with X1 standard normal and X2
    Bernoulli(1/2), mutually independent and independent of the latent factors;
    they are drawn once per individual and held fixed over time.
    """

    outcome: OutcomeParams = field(default_factory=default_outcome_params)
    choice: ChoiceParams = field(default_factory=lambda: ChoiceParams(rho=2.0, kappa=0.5))
    xk: MixtureSpec = field(default_factory=MixtureSpec)
    seed: int = 0

    def with_crra(self, chi: float = 1.5, delta: float | None = None) -> "DgpConfig":
        delta = self.choice.kappa if delta is None else delta
        return replace(self, choice=replace(self.choice, chi=chi, delta=delta))


@dataclass(frozen=True)
class LatentRecord:
    """Simulation side-channel for oracle tests; never part of PanelData."""

    xk: np.ndarray            # (n,)
    xu: np.ndarray            # (n, p)
    potential: np.ndarray     # (n, T, D) potential outcomes
    mu_path: np.ndarray       # (n, T) posterior mean entering each period (p = 1)
    ccp_path: np.ndarray      # (n, T, D) choice probabilities used


def _draw_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    x = np.empty((n, 3))
    x[:, 0] = 1.0
    x[:, 1] = rng.standard_normal(n)
    x[:, 2] = rng.integers(0, 2, size=n).astype(float)
    return x


def simulate_panel(config: DgpConfig, n: int, rng: np.random.Generator,
                   forced_choices: np.ndarray | None = None,
                   crra: bool = False) -> tuple[PanelData, LatentRecord]:
    """Simulate n individuals; returns the observable panel plus latent record.

    Choices are drawn from the implied softmax (EV1 shocks are never drawn
    explicitly).  ``forced_choices`` overrides the choice process with a fixed
    1-based path, shared by everyone.
    """
    params, choice = config.outcome, config.choice
    T, D, p = params.T, params.D, params.p
    if p != 1:
        raise NotImplementedError("the simulator supports p = 1")
    x = _draw_covariates(rng, n)
    xk = sample_xk(rng, config.xk, size=n)
    su = float(params.sigma_u[0, 0])
    xu = rng.standard_normal((n, 1)) * np.sqrt(su)
    eps = rng.standard_normal((n, T, D)) * np.sqrt(params.sigma2)[None, :, :]
    u_choice = rng.uniform(size=(n, T))

    potential = np.empty((n, T, D))
    for t in range(T):
        for d in range(D):
            potential[:, t, d] = (x @ params.beta[t, d]
                                  + xk * params.lambda_k[t, d]
                                  + xu[:, 0] * params.lambda_u[t, d, 0]
                                  + eps[:, t, d])

    y = np.empty((n, T))
    dd = np.empty((n, T), dtype=np.int64)
    mu_path = np.zeros((n, T))
    ccp_path = np.empty((n, T, D))
    # scalar belief recursion, vectorized over individuals
    mu = np.zeros(n)
    prec = np.full(n, 1.0 / su)
    for t in range(T):
        mu_path[:, t] = mu
        sigma_t = 1.0 / prec
        means = np.empty((n, D))
        varis = np.empty((n, D))
        for d in range(D):
            means[:, d] = (x @ params.beta[t, d] + xk * params.lambda_k[t, d]
                           + mu * params.lambda_u[t, d, 0])
            varis[:, d] = params.lambda_u[t, d, 0] ** 2 * sigma_t + params.sigma2[t, d]
        if crra:
            chi = choice.chi
            if chi is None:
                raise UnsupportedParameterError("crra simulation needs chi")
            if chi == 1.0:
                raise UnsupportedParameterError("chi = 1 is not supported")
            delta = choice.kappa if choice.delta is None else choice.delta
            # biased subjective mean adds delta*xk*lambda_u per alternative
            mb = means + delta * xk[:, None] * params.lambda_u[t, :, 0][None, :]
            v = (np.exp(mb * (1.0 - chi) + 0.5 * varis * (1.0 - chi) ** 2)
                 / (1.0 - chi))
        else:
            v = choice.rho * means
            v[:, 1] += choice.rho * choice.kappa * xk
        probs = _softmax_choice(v)
        ccp_path[:, t, :] = probs
        if forced_choices is not None:
            dt = np.full(n, int(forced_choices[t]) - 1, dtype=np.int64)
        else:
            cum = np.cumsum(probs, axis=1)
            dt = (u_choice[:, t][:, None] > cum).sum(axis=1)
        dd[:, t] = dt + 1
        y[:, t] = potential[np.arange(n), t, dt]
        # belief update along the realized history (true xk)
        lam = params.lambda_u[t, dt, 0]
        s2 = params.sigma2[t, dt]
        resid = y[:, t] - np.einsum("ij,ij->i", x, params.beta[t, dt]) \
            - xk * params.lambda_k[t, dt]
        new_prec = prec + lam ** 2 / s2
        mu = (prec * mu + lam * resid / s2) / new_prec
        prec = new_prec

    xx = np.repeat(x[:, None, :], T, axis=1)
    panel = PanelData(y, dd, xx)
    latent = LatentRecord(xk=xk, xu=xu, potential=potential,
                          mu_path=mu_path, ccp_path=ccp_path)
    return panel, latent


def simulate_panel_crra(config: DgpConfig, n: int,
                        rng: np.random.Generator) -> tuple[PanelData, LatentRecord]:
    """Risk-averse variant of the simulator (chi != 1, biased beliefs)."""
    if config.choice.chi is None:
        config = config.with_crra()
    return simulate_panel(config, n, rng, crra=True)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based Philox stream derived from a master seed and stream tags."""
    key = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(key))
