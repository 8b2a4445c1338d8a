import numpy as np
import pytest

from thbgrid.boundary import coons_patch
from thbgrid.dwr import adapt_loop
from thbgrid.geometries import horseshoe, quarter_annulus, tube
from thbgrid.solvers import SolverConfig, solve
from thbgrid.thb import build_initial_space, uniform_space

NEWTON = SolverConfig(method="newton")


@pytest.fixture(scope="session")
def annulus():
    return quarter_annulus()


@pytest.fixture(scope="session")
def horseshoe_boundary():
    return horseshoe()


@pytest.fixture(scope="session")
def horseshoe_coarse_space(horseshoe_boundary):
    # 5x5 start with boundary-driven refinement; the EGG solution folds here
    return build_initial_space(5, horseshoe_boundary, 1e-2)


@pytest.fixture(scope="session")
def horseshoe_star(horseshoe_boundary, horseshoe_coarse_space):
    """Bijective horseshoe parameterization produced by the DWR loop."""
    x0 = coons_patch(horseshoe_boundary, horseshoe_coarse_space)
    x, reports = adapt_loop(x0, "bijectivity", NEWTON, beta=0.2, boundary=horseshoe_boundary)
    assert reports[-1].n_negative == 0
    return x


@pytest.fixture(scope="session")
def annulus_solution(annulus):
    x, rep = solve(coons_patch(annulus, uniform_space(6, 3, 2)), NEWTON)
    assert rep.converged
    return x


@pytest.fixture(scope="session")
def tube_star():
    x, rep = solve(coons_patch(tube(), uniform_space(16, 3, 2)), NEWTON)
    assert rep.converged
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
