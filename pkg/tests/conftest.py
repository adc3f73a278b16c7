"""Session-scoped trained artifacts shared between module tests and acceptance."""

import pytest

from pdeascent import bsde
from pdeascent.problems import ConstantDiffusion, HeatProblem, MertonProblem

from helpers import solver_config


@pytest.fixture(scope="session")
def trained_heat_field():
    """Heat check problem (d=1, sigma=0.5, g=|x|^2) trained at desk scale."""
    problem = HeatProblem(sigma_value=0.5, dim=1, horizon=1.0)
    sigma = ConstantDiffusion(problem, 0.5)
    spec = bsde.make_semilinear_spec(problem, sigma)
    config = solver_config(epochs=120, sample=2048, batch=256, lr=6e-3)
    field = bsde.train_semilinear(spec, config, seed=2024)
    return problem, spec, config, field


@pytest.fixture(scope="session")
def trained_merton_semilinear():
    """Merton problem at fixed sigma=0.5 trained at desk scale."""
    problem = MertonProblem(lam=0.5, eta=1.0, horizon=1.0)
    sigma = ConstantDiffusion(problem, 0.5)
    spec = bsde.make_semilinear_spec(problem, sigma)
    config = solver_config(epochs=150, sample=4096, batch=256, lr=6e-3)
    field = bsde.train_semilinear(spec, config, seed=11)
    return problem, spec, config, field
