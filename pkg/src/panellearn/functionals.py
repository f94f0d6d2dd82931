"""Variance decompositions of weighted potential-outcome sums, mixture
quantiles, and the quantile/average structural functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .model import ChoiceParams, OutcomeParams, PosteriorState, prior_state
from .npmle import GridMixture
from .simulate import MixtureSpec, _softmax_choice, sample_xk


class EmptyCellError(ValueError):
    """No simulated history matches the conditioning choice path."""


@dataclass(frozen=True)
class WeightedSumSpec:
    """Weights and choice path defining Y(w, d) = sum_t w_t Y_t(d_t)."""

    weights: np.ndarray
    path: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "path", tuple(int(d) for d in self.path))
        if w.shape != (len(self.path),):
            raise ValueError("weights and choice path must share length T")


def discounted_spec(path, discount: float = 0.95) -> WeightedSumSpec:
    T = len(path)
    return WeightedSumSpec(discount ** np.arange(T), tuple(path))


@dataclass(frozen=True)
class DecompositionResult:
    v_unknown: float
    v_known: float
    total: float
    method: str                 # "closed-form" or "monte-carlo"
    mc_se: float | None = None  # MC method: batch-means SE of the identity residual


# ---------------------------------------------------------------------------
# Mixture helpers
# ---------------------------------------------------------------------------

def mixture_moments(mix: GridMixture) -> tuple[float, float]:
    mean = float(mix.weights @ mix.support)
    var = float(mix.weights @ mix.support ** 2) - mean ** 2
    return mean, max(var, 0.0)


def mixture_quantile(mix: GridMixture, alpha: float) -> float:
    """Left-continuous generalized inverse of the mixture CDF."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    cdf = np.cumsum(mix.weights)
    idx = int(np.searchsorted(cdf, alpha - 1e-12, side="left"))
    idx = min(idx, mix.support.size - 1)
    return float(mix.support[idx])


def _xk_moments(xk_dist) -> tuple[float, float]:
    if isinstance(xk_dist, GridMixture):
        return mixture_moments(xk_dist)
    if isinstance(xk_dist, MixtureSpec):
        return xk_dist.moments()
    raise TypeError("xk_dist must be a GridMixture or a MixtureSpec")


def _xk_atoms(xk_dist, m: int = 4000) -> tuple[np.ndarray, np.ndarray]:
    """Finite-support view of a known-factor distribution (exact for grids,
    fine CDF-difference discretization for truncated mixtures)."""
    if isinstance(xk_dist, GridMixture):
        return xk_dist.support, xk_dist.weights
    if isinstance(xk_dist, MixtureSpec):
        lo_b, hi_b = xk_dist.bounds
        edges = np.linspace(float(lo_b.min()), float(hi_b.max()), m + 1)
        w = np.diff(xk_dist.cdf(edges))
        mid = 0.5 * (edges[:-1] + edges[1:])
        keep = w > 0
        w = w[keep] / w[keep].sum()
        return mid[keep], w
    raise TypeError("xk_dist must be a GridMixture or a MixtureSpec")


def _xk_sample(rng: np.random.Generator, xk_dist, size: int) -> np.ndarray:
    if isinstance(xk_dist, GridMixture):
        return rng.choice(xk_dist.support, size=size, p=xk_dist.weights)
    if isinstance(xk_dist, MixtureSpec):
        return sample_xk(rng, xk_dist, size=size)
    raise TypeError("xk_dist must be a GridMixture or a MixtureSpec")


# ---------------------------------------------------------------------------
# Posterior variance and decompositions
# ---------------------------------------------------------------------------

def posterior_variance(spec: WeightedSumSpec, state: PosteriorState, from_t: int,
                       outcome: OutcomeParams) -> float:
    """Variance of the weighted outcome sum given the period-from_t belief:
    the learning term sums w w lam' Sigma lam over period pairs >= from_t, the
    transitory term sums the squared-weighted shock variances."""
    T = outcome.T
    if not 1 <= from_t <= T:
        raise ValueError("from_t must lie in 1..T")
    w = spec.weights
    lam = np.stack([outcome.lambda_u[t - 1, spec.path[t - 1] - 1]
                    for t in range(1, T + 1)])     # (T, p)
    sig = np.array([outcome.sigma2[t - 1, spec.path[t - 1] - 1]
                    for t in range(1, T + 1)])
    idx = np.arange(from_t - 1, T)
    wl = (w[idx, None] * lam[idx]).sum(axis=0)
    learn = float(wl @ state.Sigma @ wl)
    trans = float((w[idx] ** 2 * sig[idx]).sum())
    return learn + trans


def decompose_t1(spec: WeightedSumSpec, outcome: OutcomeParams, xk_dist,
                 x: np.ndarray | None = None) -> DecompositionResult:
    """Period-1 split of Var(Y(w,d) | X) into uncertainty and the known
    component (Var(X*_k) times the squared weighted lambda_k sum)."""
    v_u = posterior_variance(spec, prior_state(outcome), 1, outcome)
    lam_k = np.array([outcome.lambda_k[t, spec.path[t] - 1]
                      for t in range(outcome.T)])
    _, var_xk = _xk_moments(xk_dist)
    v_k = var_xk * float(spec.weights @ lam_k) ** 2
    return DecompositionResult(v_unknown=v_u, v_known=v_k, total=v_u + v_k,
                               method="closed-form")


def _simulate_histories(outcome: OutcomeParams, choice: ChoiceParams, xk_dist,
                        x: np.ndarray, upto_t: int, mode: str, draws: int,
                        rng: np.random.Generator):
    """Latent draws plus realized histories through period upto_t - 1 at fixed
    covariates; mode 'model' uses the model CCPs, 'uniform' randomizes."""
    T, D = outcome.T, outcome.D
    xk = _xk_sample(rng, xk_dist, draws)
    su = float(outcome.sigma_u[0, 0])
    xu = rng.standard_normal(draws) * np.sqrt(su)
    eps = rng.standard_normal((draws, T, D)) * np.sqrt(outcome.sigma2)[None, :, :]
    u_choice = rng.uniform(size=(draws, T))
    mu = np.zeros(draws)
    prec = np.full(draws, 1.0 / su)
    paths = np.zeros((draws, max(upto_t - 1, 0)), dtype=np.int64)
    for t in range(upto_t - 1):
        if mode == "uniform":
            dt = np.floor(u_choice[:, t] * D).astype(np.int64)
            dt = np.clip(dt, 0, D - 1)
        else:
            v = np.empty((draws, D))
            for d in range(D):
                mean = (float(x @ outcome.beta[t, d]) + xk * outcome.lambda_k[t, d]
                        + mu * outcome.lambda_u[t, d, 0])
                v[:, d] = choice.rho * mean
            v[:, 1] += choice.rho * choice.kappa * xk
            probs = _softmax_choice(v)
            cum = np.cumsum(probs, axis=1)
            dt = (u_choice[:, t][:, None] > cum).sum(axis=1)
        paths[:, t] = dt + 1
        lam = outcome.lambda_u[t, dt, 0]
        s2 = outcome.sigma2[t, dt]
        # outcome residual y - x'beta - xk*lam_k collapses to xu*lam + eps
        resid = xu * lam + eps[np.arange(draws), t, dt]
        new_prec = prec + lam ** 2 / s2
        mu = (prec * mu + lam * resid / s2) / new_prec
        prec = new_prec
    return xk, xu, eps, paths, mu, prec


def decompose_t(spec: WeightedSumSpec, t: int, which: str, outcome: OutcomeParams,
                choice: ChoiceParams, xk_dist, x: np.ndarray,
                mc_draws: int = 100_000,
                rng: np.random.Generator | None = None) -> DecompositionResult:
    """Period-t decompositions: 'cond' conditions on the realized choice path,
    'uncond' averages the posterior variance over realized paths, and
    'counterfactual' randomizes assignment uniformly.  Monte Carlo under the
    supplied model; the uncertainty terms use the closed-form posterior
    variance along each simulated path."""
    if t == 1:
        return decompose_t1(spec, outcome, xk_dist, x)
    T = outcome.T
    if not 2 <= t <= T:
        raise ValueError("t must lie in 1..T")
    if np.any(spec.weights[: t - 1] != 0.0):
        raise ValueError("weights before the decomposition period must be zero")
    if which not in ("cond", "uncond", "counterfactual"):
        raise ValueError("which must be cond | uncond | counterfactual")
    rng = rng or np.random.default_rng(0)
    mode = "uniform" if which == "counterfactual" else "model"
    xk, xu, eps, paths, mu, prec = _simulate_histories(
        outcome, choice, xk_dist, x, t, mode, mc_draws, rng)

    w = spec.weights
    path = np.array(spec.path, dtype=np.int64)
    base = np.array([float(x @ outcome.beta[s, path[s] - 1]) for s in range(T)])
    lam_k = np.array([outcome.lambda_k[s, path[s] - 1] for s in range(T)])
    lam_u = np.array([outcome.lambda_u[s, path[s] - 1, 0] for s in range(T)])
    idx = np.arange(t - 1, T)
    wb = float(w[idx] @ base[idx])
    wk = float(w[idx] @ lam_k[idx])
    wu = float(w[idx] @ lam_u[idx])
    # realized weighted sum of the potential outcomes on the functional's path
    eps_path = eps[:, idx, :][:, np.arange(idx.size), path[idx] - 1]
    y_sum = wb + wk * xk + wu * xu + eps_path @ w[idx]
    # closed-form conditional mean and posterior variance given period-t info
    cond_mean = wb + wk * xk + wu * mu
    sig_path = np.array([outcome.sigma2[s, path[s] - 1] for s in range(T)])
    trans = float((w[idx] ** 2 * sig_path[idx]).sum())
    v_u_draws = wu ** 2 / prec + trans

    if which in ("cond", "counterfactual"):
        mask = np.all(paths == path[: t - 1][None, :], axis=1)
        if not mask.any():
            raise EmptyCellError(
                f"no simulated history matches d^{t - 1} = {tuple(path[: t - 1])}")
        y_m, cm_m = y_sum[mask], cond_mean[mask]
        v_u = float(v_u_draws[mask][0])      # constant given the forced path
        total = float(y_m.var(ddof=1))
        v_k = float(cm_m.var(ddof=1))
        resid_se = _identity_residual_se(y_m, cm_m, None, v_u)
    else:
        y_m, cm_m = y_sum, cond_mean
        v_u = float(v_u_draws.mean())
        total = float(y_m.var(ddof=1))
        v_k = float(cm_m.var(ddof=1))
        resid_se = _identity_residual_se(y_m, cm_m, v_u_draws, None)
    return DecompositionResult(v_unknown=v_u, v_known=v_k, total=total,
                               method="monte-carlo", mc_se=resid_se)


def _identity_residual_se(y: np.ndarray, cond_mean: np.ndarray,
                          v_u_draws: np.ndarray | None, v_u_const: float | None,
                          batches: int = 25) -> float:
    """Batch-means SE of total - v_known - v_unknown (law of total variance)."""
    n = y.size
    b = max(2, min(batches, n // 50)) if n >= 100 else 2
    edges = np.linspace(0, n, b + 1).astype(int)
    vals = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo < 2:
            continue
        tot = y[lo:hi].var(ddof=1)
        vk = cond_mean[lo:hi].var(ddof=1)
        vu = v_u_draws[lo:hi].mean() if v_u_draws is not None else v_u_const
        vals.append(tot - vk - vu)
    vals = np.asarray(vals)
    return float(vals.std(ddof=1) / np.sqrt(len(vals)))


# ---------------------------------------------------------------------------
# Structural functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StructuralFunctions:
    """Quantile structural functions of the potential outcome Y_t(d) at x."""

    base: float          # x' beta_{t,d}
    lam_k: float
    sd_ue: float         # std dev of the unknown-factor-plus-shock part
    sd_u: float          # std dev of the unknown-factor part alone
    sd_e: float          # std dev of the transitory shocked part
    atoms: np.ndarray
    atom_w: np.ndarray
    xk_mean: float

    def s1(self, alpha: float) -> float:
        """base plus the alpha-quantile of the full composite C^k + C^u + eps,
        by bisection on the normal-mixture CDF of the convolution."""
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        centers = self.atoms * self.lam_k

        def cdf(c):
            return float(self.atom_w @ norm.cdf((c - centers) / self.sd_ue))

        lo = centers.min() - 8.0 * self.sd_ue
        hi = centers.max() + 8.0 * self.sd_ue
        for _ in range(8):
            if cdf(lo) < alpha:
                break
            lo -= 8.0 * self.sd_ue
        else:
            raise RuntimeError("bisection bracket failed on the left")
        for _ in range(8):
            if cdf(hi) > alpha:
                break
            hi += 8.0 * self.sd_ue
        else:
            raise RuntimeError("bisection bracket failed on the right")
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if cdf(mid) < alpha:
                lo = mid
            else:
                hi = mid
        return self.base + 0.5 * (lo + hi)

    def s2(self, a1: float, a2: float, a3: float) -> float:
        """base plus the sum of componentwise quantiles."""
        qk = self._scaled_atom_quantile(a1)
        return (self.base + qk + self.sd_u * norm.ppf(a2)
                + self.sd_e * norm.ppf(a3))

    def _scaled_atom_quantile(self, alpha: float) -> float:
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        # quantile of lam_k * X*_k; a negative loading mirrors the quantile
        a = alpha if self.lam_k >= 0 else 1.0 - alpha
        cdf = np.cumsum(self.atom_w)
        idx = int(np.searchsorted(cdf, a - 1e-12, side="left"))
        idx = min(idx, self.atoms.size - 1)
        return self.lam_k * float(self.atoms[idx])

    @property
    def s3(self) -> float:
        """Average structural function: base plus the mean of C^k."""
        return self.base + self.lam_k * self.xk_mean


def structural_functions(x: np.ndarray, t: int, d: int, outcome: OutcomeParams,
                         xk_dist) -> StructuralFunctions:
    ti, di = t - 1, d - 1
    base = float(np.asarray(x) @ outcome.beta[ti, di])
    lam_u = outcome.lambda_u[ti, di]
    var_u = float(lam_u @ outcome.sigma_u @ lam_u)
    var_e = float(outcome.sigma2[ti, di])
    atoms, atom_w = _xk_atoms(xk_dist)
    mean_xk, _ = _xk_moments(xk_dist)
    return StructuralFunctions(
        base=base, lam_k=float(outcome.lambda_k[ti, di]),
        sd_ue=float(np.sqrt(var_u + var_e)), sd_u=float(np.sqrt(var_u)),
        sd_e=float(np.sqrt(var_e)), atoms=atoms, atom_w=atom_w, xk_mean=mean_xk)
