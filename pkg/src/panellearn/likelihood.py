"""Complete-data likelihood with the unknown factor integrated out, and the
observed-data mixture likelihood over a grid of known-factor values.

The complete likelihood of one individual's sequence w at a candidate known
factor xk is a T-variate Gaussian density in the outcomes (mean m, covariance
V = Lu' Sigma_u Lu + diag sigma2) times the conditional choice probabilities
along the realized history; covariate-transition terms are parameter-free
constants under time-invariant covariates and are dropped from the criterion.

A vectorized engine evaluates the n x q matrix of log complete likelihoods and
its analytic derivatives with respect to every structural coordinate (p = 1);
the scalar operations below are the readable reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .model import (ChoiceParams, Observation, OutcomeParams, PanelData,
                    posterior_update, prior_state)
from .packing import FullCoords
from .simulate import ccp

DEN_FLOOR = 1e-300   # floor on the mixture argument before taking logs
LOG2PI = float(np.log(2.0 * np.pi))


class DegenerateRowError(ValueError):
    """An observation has zero likelihood at every grid point."""


# ---------------------------------------------------------------------------
# Gaussian part
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianParts:
    """Conditional mean and covariance of Y^T given the choice path, x and xk."""

    m: np.ndarray   # (T,)
    V: np.ndarray   # (T, T)

    def __post_init__(self):
        if not np.allclose(self.V, self.V.T, atol=1e-10):
            raise ValueError("V must be symmetric")


def outcome_mean_cov(w: list[Observation], xk: float,
                     params: OutcomeParams) -> GaussianParts:
    """Mean vector and covariance of the outcome sequence along a choice path."""
    T = len(w)
    m = np.empty(T)
    Lu = np.empty((T, params.p))
    sig = np.empty(T)
    for t, obs in enumerate(w):
        d = obs.d - 1
        m[t] = float(obs.x @ params.beta[t, d]) + xk * params.lambda_k[t, d]
        Lu[t] = params.lambda_u[t, d]
        sig[t] = params.sigma2[t, d]
    V = Lu @ params.sigma_u @ Lu.T + np.diag(sig)
    return GaussianParts(m=m, V=V)


def _mvn_logpdf(y: np.ndarray, m: np.ndarray, V: np.ndarray) -> float:
    c = np.linalg.cholesky(V)
    z = np.linalg.solve(c, y - m)
    return float(-0.5 * (len(y) * LOG2PI + float(z @ z)) - np.log(np.diag(c)).sum())


def complete_loglik(w: list[Observation], xk: float, outcome: OutcomeParams,
                    choice: ChoiceParams) -> float:
    """log of the complete likelihood: Gaussian outcome block plus the sum of
    log choice probabilities evaluated along the belief path at this xk.

    A zero choice probability on the realized path yields -inf (a valid
    log-likelihood value).
    """
    parts = outcome_mean_cov(w, xk, outcome)
    y = np.array([obs.y for obs in w])
    total = _mvn_logpdf(y, parts.m, parts.V)
    state = prior_state(outcome)
    for t, obs in enumerate(w, start=1):
        probs = ccp(state, obs.x, xk, t, outcome, choice)
        with np.errstate(divide="ignore"):
            total += float(np.log(probs[obs.d - 1]))
        state = posterior_update(state, obs.y, obs.x, obs.d, xk, outcome, t)
    return total


# ---------------------------------------------------------------------------
# Likelihood matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LikelihoodMatrix:
    """Row-shifted n x q matrix of log complete likelihoods.

    logL holds the shifted values (each row's maximum subtracted, so
    exp(logL) lies in (0, 1]); row_shift holds the subtracted maxima, and
    logL + row_shift[:, None] reproduces the raw values.
    """

    logL: np.ndarray
    row_shift: np.ndarray

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "LikelihoodMatrix":
        raw = np.asarray(raw, dtype=float)
        if raw.ndim != 2:
            raise ValueError("need an n x q matrix")
        shift = raw.max(axis=1)
        bad = ~np.isfinite(shift)
        if bad.any():
            raise DegenerateRowError(
                f"rows {np.flatnonzero(bad).tolist()} have zero likelihood "
                "at every grid point")
        return cls(logL=raw - shift[:, None], row_shift=shift)

    @property
    def n(self) -> int:
        return self.logL.shape[0]

    @property
    def q(self) -> int:
        return self.logL.shape[1]

    def raw(self) -> np.ndarray:
        return self.logL + self.row_shift[:, None]

    def shifted(self) -> np.ndarray:
        """exp of the shifted log matrix; entries in [0, 1], rowwise max 1."""
        return np.exp(self.logL)


def loglik_matrix(data: PanelData, support: np.ndarray, outcome: OutcomeParams,
                  choice: ChoiceParams) -> LikelihoodMatrix:
    support = np.asarray(support, dtype=float)
    if support.size == 0:
        raise ValueError("empty grid")
    if outcome.p == 1:
        raw = LikelihoodEngine(data, support, outcome, choice).raw_matrix()
    else:
        raw = np.array([[complete_loglik(data.individual(i), xk, outcome, choice)
                         for xk in support] for i in range(data.n)])
    return LikelihoodMatrix.from_raw(raw)


def observed_loglik(data: PanelData, support: np.ndarray, weights: np.ndarray,
                    outcome: OutcomeParams, choice: ChoiceParams) -> float:
    """Mixture log-likelihood sum_i log sum_s w_s lc(w_i, xk_s)."""
    L = loglik_matrix(data, support, outcome, choice)
    return mixture_loglik(L, weights)


def mixture_loglik(L: LikelihoodMatrix, weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    den = np.maximum(L.shifted() @ w, DEN_FLOOR)
    return float(L.row_shift.sum() + np.log(den).sum())


# ---------------------------------------------------------------------------
# Vectorized engine (p = 1)
# ---------------------------------------------------------------------------

class LikelihoodEngine:
    """Path-grouped evaluation of log lc and its structural derivatives.

    Individuals sharing a choice path share the covariance factorization and
    the belief-precision schedule, so everything reduces to elementwise work
    on (group x grid) arrays.  Derivative blocks are yielded per path as a
    dict full-coordinate-index -> (group x grid) array, letting callers
    contract them immediately instead of materializing an (n x q x dim) stack.
    """

    def __init__(self, data: PanelData, support: np.ndarray,
                 outcome: OutcomeParams, choice: ChoiceParams):
        if outcome.p != 1:
            raise NotImplementedError("the vectorized engine supports p = 1")
        self.data = data
        self.xk = np.asarray(support, dtype=float)
        self.outcome = outcome
        self.choice = choice
        self.coords = FullCoords(outcome.T, outcome.D, outcome.k)
        paths, inverse = np.unique(data.d, axis=0, return_inverse=True)
        self.paths = [(tuple(int(v) for v in paths[j]), np.flatnonzero(inverse == j))
                      for j in range(paths.shape[0])]

    # -- shared per-path quantities -----------------------------------------

    def _path_core(self, path: tuple, rows: np.ndarray):
        pm, ch = self.outcome, self.choice
        T = pm.T
        di = np.array(path) - 1
        lam_u = pm.lambda_u[np.arange(T), di, 0]          # (T,)
        lam_k = pm.lambda_k[np.arange(T), di]
        sig2 = pm.sigma2[np.arange(T), di]
        B = pm.beta[np.arange(T), di]                     # (T, k)
        su = float(pm.sigma_u[0, 0])
        V = su * np.outer(lam_u, lam_u) + np.diag(sig2)
        cF = np.linalg.cholesky(V)
        Vinv = np.linalg.solve(cF.T, np.linalg.solve(cF, np.eye(T)))
        logdet = 2.0 * float(np.log(np.diag(cF)).sum())
        xg = self.data.x[rows]                            # (g, T, k)
        yg = self.data.y[rows]                            # (g, T)
        m0 = np.einsum("gtk,tk->gt", xg, B)
        r0 = yg - m0
        return dict(di=di, lam_u=lam_u, lam_k=lam_k, sig2=sig2, B=B, su=su,
                    V=V, Vinv=Vinv, logdet=logdet, xg=xg, r0=r0)

    def _posteriors(self, core: dict):
        """Belief means mu_t (g, q) entering each period plus residuals and the
        path precision schedule P_t (scalars)."""
        pm = self.outcome
        T = pm.T
        xk = self.xk
        r0, lam_u, lam_k, sig2 = core["r0"], core["lam_u"], core["lam_k"], core["sig2"]
        su = core["su"]
        g = r0.shape[0]
        res = [r0[:, t][:, None] - xk[None, :] * lam_k[t] for t in range(T)]
        mus, precs = [], []
        A = np.zeros((g, xk.size))
        P = 1.0 / su
        for t in range(T):
            precs.append(P)
            mus.append(A / P)
            A = A + lam_u[t] * res[t] / sig2[t]
            P = P + lam_u[t] ** 2 / sig2[t]
        return mus, res, precs

    def _choice_systematics(self, core: dict, mus: list[np.ndarray]):
        """Per period: systematic utilities over alternatives (without the rho
        scale), probabilities, and the chosen-alternative log probability."""
        pm, ch = self.outcome, self.choice
        T, D = pm.T, pm.D
        xk = self.xk
        xg = core["xg"]
        out = []
        for t in range(T):
            mu = mus[t]
            vs = np.empty(mu.shape + (D,))
            for d in range(D):
                xb = xg[:, t] @ pm.beta[t, d]             # (g,)
                vs[:, :, d] = (xb[:, None] + xk[None, :] * pm.lambda_k[t, d]
                               + mu * pm.lambda_u[t, d, 0])
            vs[:, :, 1] += ch.kappa * xk[None, :]
            v = ch.rho * vs
            vmax = v.max(axis=2, keepdims=True)
            ev = np.exp(v - vmax)
            sev = ev.sum(axis=2)
            probs = ev / sev[:, :, None]
            chosen = core["di"][t]
            logh = v[:, :, chosen] - (vmax[:, :, 0] + np.log(sev))
            out.append(dict(vs=vs, probs=probs, logh=logh))
        return out

    # -- matrix ---------------------------------------------------------------

    def raw_matrix(self) -> np.ndarray:
        n, q = self.data.n, self.xk.size
        raw = np.empty((n, q))
        for path, rows in self.paths:
            core = self._path_core(path, rows)
            T = self.outcome.T
            r0, Vinv, lam_k = core["r0"], core["Vinv"], core["lam_k"]
            u0 = r0 @ Vinv
            a = Vinv @ lam_k
            quad0 = np.einsum("gt,gt->g", r0, u0)
            cross = r0 @ a
            qkk = float(lam_k @ a)
            quad = (quad0[:, None] - 2.0 * np.outer(cross, self.xk)
                    + qkk * self.xk[None, :] ** 2)
            block = -0.5 * (T * LOG2PI + core["logdet"] + quad)
            mus, _, _ = self._posteriors(core)
            for tinfo in self._choice_systematics(core, mus):
                block += tinfo["logh"]
            raw[rows] = block
        return raw

    # -- derivative blocks ----------------------------------------------------

    def gradient_blocks(self) -> Iterator[tuple[np.ndarray, dict]]:
        """Yield (rows, {full_coord_index: d log lc / d coord as (g, q)}).

        Derivatives are with respect to the raw (unshifted) log likelihood.
        """
        pm, ch = self.outcome, self.choice
        T, D, k = pm.T, pm.D, pm.k
        xk = self.xk
        idx = self.coords.index
        for path, rows in self.paths:
            core = self._path_core(path, rows)
            di, lam_u, lam_k, sig2 = core["di"], core["lam_u"], core["lam_k"], core["sig2"]
            su, Vinv, r0, xg = core["su"], core["Vinv"], core["r0"], core["xg"]
            g = rows.size
            q = xk.size
            blocks: dict[int, np.ndarray] = {}

            def acc(ci: int, val: np.ndarray) -> None:
                if ci in blocks:
                    blocks[ci] += val
                else:
                    blocks[ci] = val.copy() if val.base is not None else val

            # Gaussian block ----------------------------------------------
            u0 = r0 @ Vinv                                # (g, T)
            a = Vinv @ lam_k                              # (T,)
            u = u0[:, None, :] - xk[None, :, None] * a[None, None, :]   # (g,q,T)
            s_lam = u @ lam_u                             # (g, q)
            b = Vinv @ lam_u
            for t in range(T):
                d1 = int(di[t]) + 1
                for j in range(k):
                    acc(idx("beta", t + 1, d1, j), u[:, :, t] * xg[:, t, j][:, None])
                acc(idx("lambda_k", t + 1, d1), u[:, :, t] * xk[None, :])
                acc(idx("lambda_u", t + 1, d1),
                    su * (u[:, :, t] * s_lam - b[t]))
                acc(idx("sigma2", t + 1, d1), 0.5 * (u[:, :, t] ** 2 - Vinv[t, t]))
            acc(idx("sigma_u2"), 0.5 * (s_lam ** 2 - float(lam_u @ b)))

            # Choice block ------------------------------------------------
            mus, res, precs = self._posteriors(core)
            tinfos = self._choice_systematics(core, mus)
            for t in range(T):
                probs, vs = tinfos[t]["probs"], tinfos[t]["vs"]
                chosen = int(di[t])
                glog = -probs
                glog[:, :, chosen] += 1.0                 # 1{d = d_t} - p_d
                # scale coordinate: dv/d rho = vs
                acc(idx("rho"), np.einsum("gqd,gqd->gq", glog, vs))
                acc(idx("kappa"), glog[:, :, 1] * (ch.rho * xk[None, :]))
                for d in range(D):
                    gd = ch.rho * glog[:, :, d]
                    for j in range(k):
                        acc(idx("beta", t + 1, d + 1, j), gd * xg[:, t, j][:, None])
                    acc(idx("lambda_k", t + 1, d + 1), gd * xk[None, :])
                    acc(idx("lambda_u", t + 1, d + 1), gd * mus[t])
                if t == 0:
                    continue
                # indirect effects through the belief mean entering period t
                M = ch.rho * np.einsum("gqd,d->gq", glog, pm.lambda_u[t, :, 0])
                P = precs[t]
                mu_t = mus[t]
                for s in range(t):
                    ds = int(di[s]) + 1
                    base = M * (lam_u[s] / (sig2[s] * P))
                    for j in range(k):
                        acc(idx("beta", s + 1, ds, j), -base * xg[:, s, j][:, None])
                    acc(idx("lambda_k", s + 1, ds), -base * xk[None, :])
                    acc(idx("lambda_u", s + 1, ds),
                        M * (res[s] - 2.0 * mu_t * lam_u[s]) / (sig2[s] * P))
                    acc(idx("sigma2", s + 1, ds),
                        -M * lam_u[s] * (res[s] - mu_t * lam_u[s]) / (sig2[s] ** 2 * P))
                acc(idx("sigma_u2"), M * mu_t / (su ** 2 * P))
            yield rows, blocks

    def full_gradient_array(self) -> np.ndarray:
        """(dim_full, n, q) stack of d log lc / d theta; for small problems."""
        out = np.zeros((len(self.coords), self.data.n, self.xk.size))
        for rows, blocks in self.gradient_blocks():
            for ci, val in blocks.items():
                out[ci][rows] = val
        return out

    def contract_gradient(self, weights_nq: np.ndarray) -> np.ndarray:
        """sum_{i,s} weights[i,s] * d log lc_is / d theta, over full coords."""
        g = np.zeros(len(self.coords))
        for rows, blocks in self.gradient_blocks():
            wR = weights_nq[rows]
            for ci, val in blocks.items():
                g[ci] += float(np.einsum("gq,gq->", wR, val))
        return g
