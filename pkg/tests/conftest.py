"""
Pytest configuration and shared fixtures for the nlsmod tests.
"""

import os
import sys

import pytest

# Add the app directory to Python path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "app"))

# Registries must land in each test's own directory
os.environ.pop("DATABASE_URL", None)

from database import Base, create_tables  # noqa: E402
from elliptic import build_bundle  # noqa: E402
from spectral import Nonlinearity, Potential, SpectralGrid  # noqa: E402
from sqlalchemy import create_engine  # noqa: E402
from sqlalchemy.pool import StaticPool  # noqa: E402
from vortex import VortexProblem, solve_vortex  # noqa: E402


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run the full-resolution reproductions marked slow",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def grid():
    """64 x 64 grid on [-8, 8]^2."""
    return SpectralGrid.square(8.0, 64)


@pytest.fixture(scope="session")
def eg1_problem():
    """Harmonic trap, lambda = -0.5, w = 1.1, m = 1 on a reduced grid."""
    return VortexProblem(
        grid=SpectralGrid.square(8.0, 64),
        potential=Potential.harmonic(0.5),
        nonlinearity=Nonlinearity(-0.5),
        w=1.1,
        m=1,
        epsilon=0.01,
        pseudo_dt=0.1,
    )


@pytest.fixture(scope="session")
def eg1_vortex(eg1_problem):
    """(phi, report) of the reduced eg1 vortex."""
    return solve_vortex(eg1_problem)


@pytest.fixture(scope="session")
def eg1_bundle(eg1_problem, eg1_vortex):
    return build_bundle(eg1_problem, eg1_vortex[0])


@pytest.fixture
def registry_engine():
    """In-memory registry shared across sessions."""
    engine = create_engine(
        "sqlite://",
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )
    create_tables(engine)
    yield engine
    Base.metadata.drop_all(bind=engine)
