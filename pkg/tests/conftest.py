import numpy as np
import pytest

from nlqmm.core import Cluster, ClusteredDataset, VarianceSpec
from nlqmm.model import builtin_biexp, builtin_logistic4, identity_design


def logistic_cluster(rng, n=6, cid=1, u=(0.0, 0.0), noise=1.0):
    x = np.sort(rng.uniform(0, 20, n))
    b = np.array([70.0, 10.0, 3.0, 10.0])
    f = (b[0] - b[3] + u[0]) / (1 + np.exp((b[1] + u[1] - x) / b[2])) + b[3]
    return Cluster(cid, f + noise * rng.standard_normal(n), x)


def biexp_cluster(rng, n=6, cid=1, noise=0.05):
    x = np.sort(rng.uniform(0.25, 8, n))
    f = 2.0 * np.exp(-np.exp(0.8) * x) + 0.4 * np.exp(-np.exp(-1.5) * x)
    return Cluster(cid, f + noise * rng.standard_normal(n), x)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def logistic_setup():
    return builtin_logistic4(), identity_design(4, [0, 1]), VarianceSpec("general", 2)


@pytest.fixture
def biexp_setup():
    return builtin_biexp(), identity_design(4, [0, 1]), VarianceSpec("diagonal", 2)


@pytest.fixture
def small_logistic_data():
    rng = np.random.default_rng(5)
    U = rng.multivariate_normal([0, 0], [[4, -2], [-2, 5]], size=30)
    return ClusteredDataset([logistic_cluster(rng, 8, i + 1, U[i]) for i in range(30)])


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)
