"""Independent oracles shared across test modules: grid-discretized Bayes
updates, direct quadrature of the mixed likelihood, and the binned
selection-on-observables statistic.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import quad

import panellearn as pl


def grid_bayes_moments(mu0: float, s0: float, obs: list[tuple[float, float, float]],
                       npts: int = 400_001) -> tuple[float, float]:
    """Posterior mean/variance of a scalar latent by brute-force discretization.

    obs is a list of (residual, loading, noise_variance) triplets; the prior is
    N(mu0, s0).  The grid covers the prior and every likelihood center out to
    12 standard deviations, so truncation error is negligible next to the
    O(h^2) quadrature error.
    """
    lo, hi = mu0 - 12.0 * np.sqrt(s0), mu0 + 12.0 * np.sqrt(s0)
    for resid, lam, sig2 in obs:
        if abs(lam) > 1e-6:
            center = resid / lam
            width = np.sqrt(sig2) / abs(lam)
            lo = min(lo, center - 12.0 * width)
            hi = max(hi, center + 12.0 * width)
    x = np.linspace(lo, hi, npts)
    logw = -0.5 * (x - mu0) ** 2 / s0
    for resid, lam, sig2 in obs:
        logw = logw - 0.5 * (resid - lam * x) ** 2 / sig2
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = float(w @ x)
    var = float(w @ (x - mean) ** 2)
    return mean, var


def scalar_params(lam: float, sig2: float, s0: float, beta0: float = 0.0,
                  lam_k: float = 0.0, T: int = 1) -> pl.OutcomeParams:
    """Minimal one-alternative model with scalar covariate, for oracle tests."""
    beta = np.full((T, 1, 1), beta0)
    lk = np.full((T, 1), lam_k)
    lu = np.full((T, 1, 1), lam)
    s2 = np.full((T, 1), sig2)
    return pl.OutcomeParams(beta, lk, lu, s2, np.array([[s0]]))


def quadrature_complete_loglik(w, xk: float, outcome: pl.OutcomeParams,
                               choice: pl.ChoiceParams) -> float:
    """log integral over the unknown factor of the joint outcome density times
    the choice probabilities along the realized history (p = 1)."""
    su = float(outcome.sigma_u[0, 0])
    states = pl.posterior_path(w[:-1], xk, outcome)
    log_ccp = 0.0
    for t, obs in enumerate(w, start=1):
        probs = pl.ccp(states[t - 1], obs.x, xk, t, outcome, choice)
        log_ccp += float(np.log(probs[obs.d - 1]))

    def dens(xu: float) -> float:
        val = np.exp(-0.5 * xu ** 2 / su) / np.sqrt(2 * np.pi * su)
        for t, obs in enumerate(w):
            d = obs.d - 1
            mean = (float(obs.x @ outcome.beta[t, d])
                    + xk * outcome.lambda_k[t, d]
                    + xu * outcome.lambda_u[t, d, 0])
            s2 = outcome.sigma2[t, d]
            val *= np.exp(-0.5 * (obs.y - mean) ** 2 / s2) / np.sqrt(2 * np.pi * s2)
        return val

    bound = 12.0 * np.sqrt(su) + 12.0
    integral, _ = quad(dens, -bound, bound, epsabs=0.0, epsrel=1e-12, limit=400)
    return float(np.log(integral)) + log_ccp


def selection_tstat(n_draws: int, seed: int = 2024, t_check: int = 2,
                    mu_bins: int = 50, xk_bins: int = 10) -> float:
    """Pooled within-cell t statistic for corr(D_t, X*_u) after binning on the
    period-t posterior mean and the known factor, stratified by the realized
    period-1 choice.  Fine posterior-mean bins keep the discretization bias of
    the conditioning well below the criterion's 4-SE band.
    """
    dgp = pl.DgpConfig()
    rng = pl.make_rng(seed, n_draws)
    panel, latent = pl.simulate_panel(dgp, n_draws, rng)
    ti = t_check - 1
    dvar = (panel.d[:, ti] == 2).astype(float)
    mu = latent.mu_path[:, ti]
    xu = latent.xu[:, 0]
    cells = []
    for d1 in (1, 2):
        sel = panel.d[:, 0] == d1
        mu_edges = np.quantile(mu[sel], np.linspace(0, 1, mu_bins + 1))
        xk_edges = np.quantile(latent.xk[sel], np.linspace(0, 1, xk_bins + 1))
        mu_idx = np.clip(np.searchsorted(mu_edges, mu[sel]) - 1, 0, mu_bins - 1)
        xk_idx = np.clip(np.searchsorted(xk_edges, latent.xk[sel]) - 1, 0, xk_bins - 1)
        cells.append((sel, mu_idx * xk_bins + xk_idx))
    # demean within cells, then pool the partial correlation
    d_dm = np.empty(n_draws)
    u_dm = np.empty(n_draws)
    for sel, cell in cells:
        dv, uv = dvar[sel], xu[sel]
        dd, uu = dv.copy(), uv.copy()
        for c in np.unique(cell):
            m = cell == c
            dd[m] -= dv[m].mean()
            uu[m] -= uv[m].mean()
        d_dm[sel] = dd
        u_dm[sel] = uu
    denom = np.sqrt(float(d_dm @ d_dm) * float(u_dm @ u_dm))
    r = float(d_dm @ u_dm) / denom
    return r * np.sqrt(n_draws - 2) / np.sqrt(max(1e-300, 1.0 - r ** 2))


def variance_se(x: np.ndarray) -> float:
    """Standard error of the sample variance via the fourth central moment."""
    n = x.size
    m = x.mean()
    m2 = float(((x - m) ** 2).mean())
    m4 = float(((x - m) ** 4).mean())
    return float(np.sqrt(max(m4 - m2 ** 2, 0.0) / n))
