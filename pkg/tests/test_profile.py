import numpy as np
import pytest

import panellearn as pl
from panellearn.likelihood import LikelihoodMatrix
from panellearn.npmle import InnerSolution
from panellearn.packing import ParamPacker
from panellearn.profile import (BoundaryKinkError, ProfileEval,
                                profile_gradient, profile_value,
                                weight_jacobian)


@pytest.fixture(scope="module")
def setup(dgp, mid_panel):
    panel, _ = mid_panel
    support = pl.build_grid(panel.n)
    packer = ParamPacker(dgp.outcome, dgp.choice)
    ev = profile_value(dgp.outcome, dgp.choice, panel, support)
    return panel, support, packer, ev


def test_value_single_point_grid(dgp, small_panel):
    panel, _ = small_panel
    ev = profile_value(dgp.outcome, dgp.choice, panel, np.array([0.25]))
    direct = sum(pl.complete_loglik(panel.individual(i), 0.25, dgp.outcome,
                                    dgp.choice) for i in range(panel.n))
    assert abs(ev.value - direct) < 1e-7
    assert ev.inner.certified


def test_value_dominates_random_weights(dgp, setup):
    panel, support, _, ev = setup
    rng = np.random.default_rng(0)
    L = pl.loglik_matrix(panel, support, dgp.outcome, dgp.choice)
    from panellearn.likelihood import mixture_loglik
    for _ in range(10):
        w = rng.dirichlet(np.ones(support.size))
        assert ev.value >= mixture_loglik(L, w) - 1e-9


def test_value_equals_observed_loglik(dgp, setup):
    panel, support, _, ev = setup
    got = pl.observed_loglik(panel, support, ev.inner.weights, dgp.outcome,
                             dgp.choice)
    assert abs(ev.value - got) < 1e-10


@pytest.mark.slow
def test_truth_beats_perturbed_alpha(dgp):
    # intercept shifts of +0.5 should lose on simulated data almost surely
    wins = 0
    beta_p = dgp.outcome.beta.copy()
    beta_p[:, :, 0] += 0.5
    perturbed = pl.OutcomeParams(beta_p, dgp.outcome.lambda_k,
                                 dgp.outcome.lambda_u, dgp.outcome.sigma2,
                                 dgp.outcome.sigma_u)
    for rep in range(20):
        panel, _ = pl.simulate_panel(dgp, 2000, pl.make_rng(300, rep))
        support = pl.build_grid(2000)
        v_true = profile_value(dgp.outcome, dgp.choice, panel, support).value
        v_pert = profile_value(perturbed, dgp.choice, panel, support).value
        wins += v_true > v_pert
    assert wins >= 19


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def fd_gradient(packer, panel, support, x0, h=1e-5):
    fd = np.zeros_like(x0)
    for j in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        op, cp = packer.unpack(xp)
        om, cm = packer.unpack(xm)
        fp = profile_value(op, cp, panel, support).value
        fm = profile_value(om, cm, panel, support).value
        fd[j] = (fp - fm) / (2 * h)
    return fd


def test_gradient_matches_finite_differences(dgp, setup):
    panel, support, packer, ev = setup
    grad = profile_gradient(dgp.outcome, dgp.choice, panel, support,
                            evaluation=ev, packer=packer)
    x0 = packer.pack(dgp.outcome, dgp.choice)
    fd = fd_gradient(packer, panel, support, x0)
    rel = np.abs(fd - grad) / np.maximum(1.0, np.abs(fd))
    assert rel.max() < 1e-4


def test_envelope_equals_implicit(dgp, setup):
    panel, support, packer, ev = setup
    ga = profile_gradient(dgp.outcome, dgp.choice, panel, support,
                          method="envelope", evaluation=ev, packer=packer)
    gb = profile_gradient(dgp.outcome, dgp.choice, panel, support,
                          method="implicit", evaluation=ev, packer=packer)
    assert np.abs(ga - gb).max() < 1e-6


def test_dead_parameters_have_zero_gradient(dgp, small_panel):
    # a one-point grid at zero makes every lambda_k and kappa coordinate dead
    panel, _ = small_panel
    support = np.array([0.0])
    packer = ParamPacker(dgp.outcome, dgp.choice)
    ev = profile_value(dgp.outcome, dgp.choice, panel, support)
    grad = profile_gradient(dgp.outcome, dgp.choice, panel, support,
                            evaluation=ev, packer=packer)
    for name, g in zip(packer.names, grad):
        if name.startswith("lambdak") or name == "kappa":
            assert g == 0.0, name


def test_uncertified_inner_warns(dgp, small_panel):
    panel, _ = small_panel
    support = np.array([-0.5, 0.5])
    L = pl.loglik_matrix(panel, support, dgp.outcome, dgp.choice)
    sloppy = InnerSolution(weights=np.array([0.5, 0.5]), dual=np.zeros(2),
                           objective=0.0, kkt_residual=1.0, iterations=0,
                           certified=False)
    with pytest.warns(RuntimeWarning):
        profile_gradient(dgp.outcome, dgp.choice, panel, support,
                         evaluation=ProfileEval(0.0, sloppy))


# ---------------------------------------------------------------------------
# weight_jacobian
# ---------------------------------------------------------------------------

def test_jacobian_matches_resolve_differences(dgp, setup):
    panel, support, packer, ev = setup
    J = weight_jacobian(dgp.outcome, dgp.choice, panel, support, ev.inner,
                        packer=packer)
    x0 = packer.pack(dgp.outcome, dgp.choice)
    h = 1e-5
    S = np.flatnonzero(ev.inner.weights > 1e-6)
    rng = np.random.default_rng(0)
    for j in rng.choice(packer.dim, size=8, replace=False):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        op, cp = packer.unpack(xp)
        om, cm = packer.unpack(xm)
        wp = profile_value(op, cp, panel, support).inner.weights
        wm = profile_value(om, cm, panel, support).inner.weights
        fd = (wp - wm) / (2 * h)
        assert np.abs(fd[S] - J[S, j]).max() < 1e-3


def test_jacobian_simplex_tangency_and_dead_column(dgp, setup):
    panel, support, packer, ev = setup
    J = weight_jacobian(dgp.outcome, dgp.choice, panel, support, ev.inner,
                        packer=packer)
    assert np.abs(J.sum(axis=0)).max() < 1e-8
    # one-point-grid dead coordinates have exactly zero Jacobian columns
    support0 = np.array([0.0, 1e6])  # second point never plausible
    ev0 = profile_value(dgp.outcome, dgp.choice, panel, support0)
    J0 = weight_jacobian(dgp.outcome, dgp.choice, panel, support0, ev0.inner,
                         packer=packer)
    kappa_col = packer.names.index("kappa")
    assert np.allclose(J0[:, kappa_col], 0.0)


def test_jacobian_row_scaling_invariance(dgp, setup):
    panel, support, packer, ev = setup
    engine = None
    J = weight_jacobian(dgp.outcome, dgp.choice, panel, support, ev.inner,
                        packer=packer)
    raw = pl.loglik_matrix(panel, support, dgp.outcome, dgp.choice).raw()
    raw2 = raw.copy()
    raw2[3] += 2.5  # multiply one individual's likelihood by e^2.5
    L2 = LikelihoodMatrix.from_raw(raw2)
    ev2 = profile_value(dgp.outcome, dgp.choice, panel, support, L=L2)
    J2 = weight_jacobian(dgp.outcome, dgp.choice, panel, support, ev2.inner,
                         packer=packer, L=L2)
    assert np.abs(J - J2).max() < 1e-8


def test_jacobian_requires_strict_complementarity(dgp, small_panel):
    # a boundary point whose dual vanishes is a kink: the argmax map is not
    # differentiable there and the reduced KKT system must be refused
    panel, _ = small_panel
    support = np.array([-0.5, 0.5])
    kinked = InnerSolution(weights=np.array([1.0, 0.0]),
                           dual=np.array([0.0, -1e-9]), objective=0.0,
                           kkt_residual=1e-9, iterations=1, certified=True)
    with pytest.raises(BoundaryKinkError):
        weight_jacobian(dgp.outcome, dgp.choice, panel, support, kinked)


def test_jacobian_rejects_uncertified(dgp, small_panel):
    panel, _ = small_panel
    sloppy = InnerSolution(weights=np.array([1.0]), dual=np.zeros(1),
                           objective=0.0, kkt_residual=1.0, iterations=0,
                           certified=False)
    with pytest.raises(BoundaryKinkError):
        weight_jacobian(dgp.outcome, dgp.choice, panel, np.array([0.0]), sloppy)
