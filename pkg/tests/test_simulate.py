import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

import panellearn as pl
from panellearn.simulate import crra_utility

from helpers import selection_tstat, variance_se


# ---------------------------------------------------------------------------
# known-factor mixture
# ---------------------------------------------------------------------------

def test_draws_respect_truncation(dgp):
    rng = pl.make_rng(1, 0)
    draws = pl.sample_xk(rng, dgp.xk, size=50_000)
    lo, hi = dgp.xk.bounds
    inside = np.zeros(draws.size, dtype=bool)
    for a, b in zip(lo, hi):
        inside |= (draws >= a) & (draws <= b)
    assert inside.all()


def test_mixture_mean_and_variance(dgp):
    rng = pl.make_rng(2, 0)
    draws = pl.sample_xk(rng, dgp.xk, size=1_000_000)
    mean, var = dgp.xk.moments()
    assert abs(mean - (-0.03)) < 1e-12
    se_mean = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - mean) < 4 * se_mean
    assert abs(draws.var() - var) < 4 * variance_se(draws)


def test_variance_formula_matches_stated_shrinkage(dgp):
    # symmetric +-3 sd truncation shrinks each component variance by
    # 1 - 6 phi(3)/(2 Phi(3) - 1)
    shrink = 1 - 6 * norm.pdf(3) / (2 * norm.cdf(3) - 1)
    m = dgp.xk
    mean = float(m.weights @ m.means)
    second = float(m.weights @ (m.means ** 2 + shrink * m.variances))
    assert abs(m.moments()[1] - (second - mean ** 2)) < 1e-14


def test_quantile_is_inverse_cdf(dgp):
    for a in (0.05, 0.25, 0.5, 0.9):
        q = dgp.xk.quantile(a)
        assert abs(float(dgp.xk.cdf(q)) - a) < 1e-9


# ---------------------------------------------------------------------------
# choice probabilities
# ---------------------------------------------------------------------------

def test_ccp_benchmark_value(dgp, x_base):
    state = pl.prior_state(dgp.outcome)
    p = pl.ccp(state, x_base, 0.0, 1, dgp.outcome, dgp.choice)
    assert abs(p[1] - 1.0 / (1.0 + np.exp(0.2))) < 1e-12
    assert p.sum() == 1.0
    assert (p > 0).all()


def test_ccp_uniform_when_scale_zero(dgp, x_base):
    state = pl.prior_state(dgp.outcome)
    p = pl.ccp(state, x_base, 1.3, 2, dgp.outcome, pl.ChoiceParams(0.0, 0.5))
    assert np.allclose(p, 0.5)


def test_ccp_ignores_heterogeneity_when_loadings_zero(dgp, x_base):
    o = dgp.outcome
    params = pl.OutcomeParams(o.beta, np.zeros_like(o.lambda_k),
                              np.zeros_like(o.lambda_u), o.sigma2, o.sigma_u)
    choice = pl.ChoiceParams(rho=2.0, kappa=0.0)
    s1 = pl.prior_state(params)
    s2 = pl.PosteriorState(np.array([3.0]), np.array([[0.4]]))
    for xk in (-1.0, 0.0, 2.0):
        pa = pl.ccp(s1, x_base, xk, 1, params, choice)
        pb = pl.ccp(s2, x_base, xk, 1, params, choice)
        assert np.allclose(pa, pb)


# ---------------------------------------------------------------------------
# simulate_panel
# ---------------------------------------------------------------------------

def test_first_period_frequency_matches_ccp(dgp):
    n = 400_000
    panel, latent = pl.simulate_panel(dgp, n, pl.make_rng(3, n))
    x0 = panel.x[:, 0, :]
    cell = (np.abs(latent.xk) < 0.05) & (np.abs(x0[:, 1]) < 0.25) & (x0[:, 2] == 0)
    assert cell.sum() > 500
    freq = (panel.d[cell, 0] == 2).mean()
    p0 = pl.ccp(pl.prior_state(dgp.outcome), np.array([1.0, 0.0, 0.0]), 0.0, 1,
                dgp.outcome, dgp.choice)[1]
    se = np.sqrt(p0 * (1 - p0) / cell.sum())
    assert abs(freq - p0) < 3 * se + 0.02  # cell-width slack on top of noise


def test_forced_path_first_period_variance(dgp):
    n = 200_000
    panel, latent = pl.simulate_panel(dgp, n, pl.make_rng(4, n),
                                      forced_choices=np.array([1, 1, 1]))
    assert (panel.d == 1).all()
    o = dgp.outcome
    _, var_xk = dgp.xk.moments()
    want = (o.beta[0, 0, 1] ** 2 + 0.25 * o.beta[0, 0, 2] ** 2
            + o.lambda_k[0, 0] ** 2 * var_xk
            + o.lambda_u[0, 0, 0] ** 2 * o.sigma_u[0, 0] + o.sigma2[0, 0])
    y1 = panel.y[:, 0]
    assert abs(y1.var() - want) < 4 * variance_se(y1)


def test_forced_path_covariance_matches_mean_cov(dgp, x_base):
    n = 200_000
    panel, latent = pl.simulate_panel(dgp, n, pl.make_rng(6, n),
                                      forced_choices=np.array([2, 1, 2]))
    w = [pl.Observation(0.0, d, x_base) for d in (2, 1, 2)]
    parts = pl.outcome_mean_cov(w, 0.0, dgp.outcome)
    # residualize y_t - x'beta - xk*lam_k, which leaves xu*lam + eps whose
    # covariance across periods is exactly V
    o = dgp.outcome
    path = (2, 1, 2)
    r = np.empty((n, 3))
    for t, d in enumerate(path):
        r[:, t] = (panel.y[:, t] - panel.x[:, t] @ o.beta[t, d - 1]
                   - latent.xk * o.lambda_k[t, d - 1])
    emp = np.cov(r.T)
    want = parts.V  # mean part removed, so covariance is V exactly
    for a in range(3):
        for b in range(3):
            se = np.sqrt((want[a, a] * want[b, b] + want[a, b] ** 2) / n)
            assert abs(emp[a, b] - want[a, b]) < 4 * se


def test_seed_determinism(dgp):
    p1, l1 = pl.simulate_panel(dgp, 500, pl.make_rng(7, 500))
    p2, l2 = pl.simulate_panel(dgp, 500, pl.make_rng(7, 500))
    assert np.array_equal(p1.y, p2.y)
    assert np.array_equal(p1.d, p2.d)
    assert np.array_equal(p1.x, p2.x)
    assert np.array_equal(l1.xu, l2.xu)


def test_selection_on_observables_small():
    assert abs(selection_tstat(200_000, seed=99)) < 4.0


def test_ccp_path_sums_to_one(dgp):
    panel, latent = pl.simulate_panel(dgp, 200, pl.make_rng(8, 200))
    assert (latent.ccp_path.sum(axis=2) == 1.0).all()


# ---------------------------------------------------------------------------
# risk-averse variant
# ---------------------------------------------------------------------------

def test_crra_zero_bias_matches_rational(dgp, x_base):
    choice = pl.ChoiceParams(rho=2.0, kappa=0.5, chi=1.5, delta=0.0)
    state = pl.PosteriorState(np.array([0.2]), np.array([[0.8]]))
    pa = pl.ccp_crra(state, x_base, 0.7, 2, dgp.outcome, choice)
    # delta = 0: the biased belief equals the correct posterior
    pb = pl.ccp_crra(state, x_base, 0.7, 2, dgp.outcome,
                     pl.ChoiceParams(2.0, 0.5, chi=1.5, delta=0.0))
    assert np.allclose(pa, pb)
    assert abs(pa.sum() - 1.0) < 1e-15


def test_crra_utility_matches_lognormal_quadrature():
    for mean_log, var_log, chi in ((0.3, 0.5, 1.5), (-0.4, 1.2, 2.0),
                                   (0.1, 0.25, 0.5)):
        got = crra_utility(mean_log, var_log, chi)
        sd = np.sqrt(var_log)

        def f(z):
            y = np.exp(mean_log + sd * z)
            return y ** (1 - chi) / (1 - chi) * norm.pdf(z)

        want, _ = quad(f, -12, 12, epsabs=0, epsrel=1e-12, limit=300)
        assert abs(got - want) < 1e-6 * max(1.0, abs(want))


def test_crra_rejects_log_utility(dgp):
    with pytest.raises(pl.UnsupportedParameterError):
        crra_utility(0.0, 1.0, 1.0)
    cfg = dgp.with_crra(chi=1.0)
    with pytest.raises(pl.UnsupportedParameterError):
        pl.simulate_panel_crra(cfg, 10, pl.make_rng(0, 1))


def test_crra_seed_determinism(dgp):
    cfg = dgp.with_crra()
    p1, _ = pl.simulate_panel_crra(cfg, 300, pl.make_rng(11, 300))
    p2, _ = pl.simulate_panel_crra(cfg, 300, pl.make_rng(11, 300))
    assert np.array_equal(p1.y, p2.y)
    assert np.array_equal(p1.d, p2.d)


def test_crra_differs_from_baseline(dgp):
    cfg = dgp.with_crra()
    pa, _ = pl.simulate_panel(dgp, 300, pl.make_rng(12, 300))
    pb, _ = pl.simulate_panel_crra(cfg, 300, pl.make_rng(12, 300))
    assert not np.array_equal(pa.d, pb.d)
