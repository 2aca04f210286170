import numpy as np
import pytest
from hypothesis import settings

from ras_testbed.partition import make_partition
from ras_testbed.problem import GridSpec, LinearSystem, laplace_2d, random_rhs

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_spd(n, rng):
    """Dense SPD matrix with a controlled condition number."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = rng.uniform(1.0, 50.0, n)
    a = (q * eig) @ q.T
    return (a + a.T) / 2


def dense_solve(system):
    """Independent reference solution: dense LU of the full matrix."""
    return np.linalg.solve(system.matrix.to_dense(), system.rhs)


def laplace_system(n_side, seed=0):
    A = laplace_2d(n_side)
    return LinearSystem(A, random_rhs(A.num_rows, seed), seed)


def partition_for(system, scheme, p):
    side = int(round(np.sqrt(system.n)))
    return make_partition(scheme, system.matrix, GridSpec(side), p)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """``record(number, title, ok, detail)``: log one acceptance verdict and assert it."""
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
