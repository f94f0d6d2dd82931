import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import panellearn as pl


@pytest.fixture(scope="session")
def dgp() -> pl.DgpConfig:
    return pl.DgpConfig()


@pytest.fixture(scope="session")
def small_panel(dgp):
    panel, latent = pl.simulate_panel(dgp, 60, pl.make_rng(5, 60))
    return panel, latent


@pytest.fixture(scope="session")
def mid_panel(dgp):
    panel, latent = pl.simulate_panel(dgp, 200, pl.make_rng(5, 200))
    return panel, latent


@pytest.fixture(scope="session")
def x_base() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0])
