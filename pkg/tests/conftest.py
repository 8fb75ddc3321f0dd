import numpy as np
import pytest

from polaris_lab.oracle import AnalyticModel, Condition, grid_mixture
from polaris_lab.schedule import build_schedule


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture(scope="session")
def grid_model():
    return grid_mixture(0)


@pytest.fixture(scope="session")
def mix2d():
    """Two well separated, anisotropic components in the plane."""
    covs = np.array([[[0.30, 0.10], [0.10, 0.20]], [[0.15, -0.05], [-0.05, 0.40]]])
    return AnalyticModel(np.array([0.35, 0.65]), np.array([[1.0, -0.5], [-1.2, 0.8]]), covs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


COND0 = Condition.component(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_lines():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
