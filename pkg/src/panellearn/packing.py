"""Parameter vectorization under normalization pins and log transforms.

The likelihood differentials are produced on a canonical *full* coordinate
list (every beta/lambda/sigma2 entry plus sigma_u2, rho, kappa); the packer
maps between that list and the *free* vector the outer optimizer sees:
pinned entries are dropped, sigma2 / sigma_u2 / rho travel through logs, and
tied sigma2 coordinates collapse to one per alternative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ChoiceParams, OutcomeParams


class FullCoords:
    """Canonical enumeration of structural coordinates (p = 1 models)."""

    def __init__(self, T: int, D: int, k: int):
        self.T, self.D, self.k = T, D, k
        names: list[tuple] = []
        for t in range(1, T + 1):
            for d in range(1, D + 1):
                for j in range(k):
                    names.append(("beta", t, d, j))
        names += [("lambda_k", t, d) for t in range(1, T + 1) for d in range(1, D + 1)]
        names += [("lambda_u", t, d) for t in range(1, T + 1) for d in range(1, D + 1)]
        names += [("sigma2", t, d) for t in range(1, T + 1) for d in range(1, D + 1)]
        names += [("sigma_u2",), ("rho",), ("kappa",)]
        self.names = names
        self._index = {name: i for i, name in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def index(self, *key) -> int:
        return self._index[tuple(key)]


def label(name: tuple) -> str:
    """CSV-safe coordinate label, e.g. alpha_2_1 or gamma1_3_2 (period_alt)."""
    kind = name[0]
    if kind == "beta":
        _, t, d, j = name
        return f"alpha_{t}_{d}" if j == 0 else f"gamma{j}_{t}_{d}"
    if kind in ("lambda_k", "lambda_u"):
        _, t, d = name
        tag = "k" if kind == "lambda_k" else "u"
        return f"lambda{tag}_{t}_{d}"
    if kind == "sigma2":
        _, t, d = name
        return f"sigma2_{t}_{d}"
    return {"sigma_u2": "sigma2_u", "rho": "rho", "kappa": "kappa"}[kind]


@dataclass(frozen=True)
class FreeCoord:
    name: str
    transform: str              # "linear" or "log"
    full_indices: tuple         # full coordinates this free coordinate drives


class ParamPacker:
    """Round-trip mapping (OutcomeParams, ChoiceParams) <-> free vector.

    The template's pinned set, tie_sigma2 flag and pinned values are preserved
    by unpack; fix_rho / fix_kappa freeze the choice block (their template
    values are kept).  Only p = 1 models are supported.
    """

    def __init__(self, template: OutcomeParams, choice_template: ChoiceParams,
                 fix_rho: bool = False, fix_kappa: bool = False):
        if template.p != 1:
            raise NotImplementedError("parameter packing supports p = 1 only")
        self.template = template
        self.choice_template = choice_template
        self.full = FullCoords(template.T, template.D, template.k)
        self.free: list[FreeCoord] = []
        pin = template.pinned
        T, D, k = template.T, template.D, template.k
        for t in range(1, T + 1):
            for d in range(1, D + 1):
                for j in range(k):
                    if ("beta", t, d, j) not in pin:
                        self._add(("beta", t, d, j), "linear")
        for t in range(1, T + 1):
            for d in range(1, D + 1):
                if ("lambda_k", t, d) not in pin:
                    self._add(("lambda_k", t, d), "linear")
        for t in range(1, T + 1):
            for d in range(1, D + 1):
                if ("lambda_u", t, d, 0) not in pin:
                    self._add(("lambda_u", t, d), "linear")
        if template.tie_sigma2:
            for d in range(1, D + 1):
                idx = tuple(self.full.index("sigma2", t, d) for t in range(1, T + 1))
                self.free.append(FreeCoord(f"log_sigma2_{d}", "log", idx))
        else:
            for t in range(1, T + 1):
                for d in range(1, D + 1):
                    self._add(("sigma2", t, d), "log", prefix="log_")
        self.free.append(FreeCoord("log_sigma2_u", "log",
                                   (self.full.index("sigma_u2"),)))
        if not fix_rho:
            self.free.append(FreeCoord("log_rho", "log", (self.full.index("rho"),)))
        if not fix_kappa:
            self.free.append(FreeCoord("kappa", "linear", (self.full.index("kappa"),)))
        self.fix_rho, self.fix_kappa = fix_rho, fix_kappa

    def _add(self, key: tuple, transform: str, prefix: str = "") -> None:
        self.free.append(FreeCoord(prefix + label(key), transform,
                                   (self.full.index(*key),)))

    @property
    def dim(self) -> int:
        return len(self.free)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.free]

    # -- full-coordinate values ------------------------------------------------

    def full_values(self, outcome: OutcomeParams, choice: ChoiceParams) -> np.ndarray:
        vals = np.empty(len(self.full))
        for i, name in enumerate(self.full.names):
            kind = name[0]
            if kind == "beta":
                _, t, d, j = name
                vals[i] = outcome.beta[t - 1, d - 1, j]
            elif kind == "lambda_k":
                _, t, d = name
                vals[i] = outcome.lambda_k[t - 1, d - 1]
            elif kind == "lambda_u":
                _, t, d = name
                vals[i] = outcome.lambda_u[t - 1, d - 1, 0]
            elif kind == "sigma2":
                _, t, d = name
                vals[i] = outcome.sigma2[t - 1, d - 1]
            elif kind == "sigma_u2":
                vals[i] = outcome.sigma_u[0, 0]
            elif kind == "rho":
                vals[i] = choice.rho
            else:
                vals[i] = choice.kappa
        return vals

    # -- pack / unpack ---------------------------------------------------------

    def pack(self, outcome: OutcomeParams, choice: ChoiceParams) -> np.ndarray:
        full = self.full_values(outcome, choice)
        x = np.empty(self.dim)
        for i, c in enumerate(self.free):
            v = full[c.full_indices[0]]
            x[i] = np.log(v) if c.transform == "log" else v
        return x

    def unpack(self, x: np.ndarray) -> tuple[OutcomeParams, ChoiceParams]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got {x.shape}")
        tpl = self.template
        beta = tpl.beta.copy()
        lam_k = tpl.lambda_k.copy()
        lam_u = tpl.lambda_u.copy()
        sigma2 = tpl.sigma2.copy()
        sigma_u = tpl.sigma_u.copy()
        rho, kappa = self.choice_template.rho, self.choice_template.kappa
        for c, v in zip(self.free, x):
            val = np.exp(v) if c.transform == "log" else float(v)
            for fi in c.full_indices:
                name = self.full.names[fi]
                kind = name[0]
                if kind == "beta":
                    _, t, d, j = name
                    beta[t - 1, d - 1, j] = val
                elif kind == "lambda_k":
                    _, t, d = name
                    lam_k[t - 1, d - 1] = val
                elif kind == "lambda_u":
                    _, t, d = name
                    lam_u[t - 1, d - 1, 0] = val
                elif kind == "sigma2":
                    _, t, d = name
                    sigma2[t - 1, d - 1] = val
                elif kind == "sigma_u2":
                    sigma_u[0, 0] = val
                elif kind == "rho":
                    rho = val
                else:
                    kappa = val
        outcome = OutcomeParams(beta, lam_k, lam_u, sigma2, sigma_u,
                                pinned=tpl.pinned, tie_sigma2=tpl.tie_sigma2)
        choice = ChoiceParams(rho, kappa, chi=self.choice_template.chi,
                              delta=self.choice_template.delta)
        return outcome, choice

    def gradient_to_free(self, g_full: np.ndarray, outcome: OutcomeParams,
                         choice: ChoiceParams) -> np.ndarray:
        """Chain-rule a full-coordinate gradient into the free vector's scale."""
        full_vals = self.full_values(outcome, choice)
        g = np.empty(self.dim)
        for i, c in enumerate(self.free):
            if c.transform == "log":
                # d/d log v = v * d/dv, summed over tied coordinates
                g[i] = sum(full_vals[fi] * g_full[fi] for fi in c.full_indices)
            else:
                g[i] = sum(g_full[fi] for fi in c.full_indices)
        return g
