import numpy as np
import pytest

from fabricsim.model import SimParams
from fabricsim.oracle import NumProblem

CHAIN_SETS = [[0, 1], [0, 1, 2], [1, 2, 3], [2, 3]]


def chain_problem(alpha: float, capacity: float = 3.0, lo: float = 0.01, hi: float = 10.0) -> NumProblem:
    return NumProblem.from_sets(CHAIN_SETS, capacity, alpha, lo, hi)


def random_instance(rng: np.random.Generator, n: int = 5, alpha: float = 1.0, capacity: float = 4.0) -> NumProblem:
    """Random symmetric neighbor structure on n vehicles."""
    upper = np.triu(rng.random((n, n)) < 0.5, 1)
    adj = upper | upper.T | np.eye(n, dtype=bool)
    w = rng.uniform(0.5, 2.0, n)
    return NumProblem(adj.astype(float), capacity, alpha, w, np.full(n, 0.05), np.full(n, 3.0))


@pytest.fixture
def params() -> SimParams:
    return SimParams()


@pytest.fixture
def in_range_params() -> SimParams:
    return SimParams(tx_power_mw=1000.0, path_loss_exp=2.0)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_VERDICTS]

    def record(criterion: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
