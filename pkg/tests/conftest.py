import numpy as np
import pytest

from seqlab.model import SimpleModel, gaussian_family


@pytest.fixture
def bern46():
    return SimpleModel.bernoulli([0.4, 0.6])


@pytest.fixture
def gauss():
    return gaussian_family()


def cusum_arl_lattice(p_up, k):
    """Exact mean run length of a CUSUM whose statistic moves +1 with
    probability p_up and -1 otherwise (reflected at 0), alarming at k."""
    P = np.zeros((k, k))
    for i in range(k):
        if i + 1 < k:
            P[i, i + 1] = p_up
        P[i, max(i - 1, 0)] += 1 - p_up
    return np.linalg.solve(np.eye(k) - P, np.ones(k))[0]


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
