import numpy as np
import pytest

from lmssn.datasets import generate_demo
from lmssn.model import GaussianValidity, NrbfNetwork, ScalingTransform, make_model


def random_network(rng, n_members, d, sigma=(0.2, 0.5)):
    members = tuple(
        GaussianValidity(rng.uniform(0, 1, d), rng.uniform(*sigma, d))
        for _ in range(n_members)
    )
    return NrbfNetwork(members)


def random_model(rng, n_x=2, n_lm_x=2, n_lm_y=2, radius=0.8, x0=None, box=2.0, **kw):
    """Small random LMSSN with contracting local models.

    The scaling maps ``[-box, box]`` in every extended coordinate onto the unit
    cube.
    """
    d = n_x + 1
    A = rng.normal(size=(n_lm_x, n_x, n_x))
    for j in range(n_lm_x):
        A[j] *= radius / max(np.max(np.abs(np.linalg.eigvals(A[j]))), 1e-3)
    B = rng.normal(size=(n_lm_x, n_x))
    O = 0.1 * rng.normal(size=(n_lm_x, n_x))
    C = rng.normal(size=(n_lm_y, n_x))
    D = 0.1 * rng.normal(size=n_lm_y)
    P = 0.1 * rng.normal(size=n_lm_y)
    scaling = ScalingTransform(np.full(d, -box), np.full(d, 2 * box))
    return make_model(A, B, O, C, D, P, random_network(rng, n_lm_x, d),
                      random_network(rng, n_lm_y, d), scaling, x0=x0, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def demo_data():
    return generate_demo(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
