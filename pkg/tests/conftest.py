import numpy as np
import pytest

from sparse3d import ProcGrid, gen_rmat, gen_uniform
from sparse3d.transport import World

SWEEP_GRIDS = [ProcGrid(1, 1, 1), ProcGrid(2, 2, 1), ProcGrid(2, 2, 2), ProcGrid(3, 2, 2), ProcGrid(3, 3, 4)]

# Lines printed by the acceptance tests, repeated in the terminal summary.
CRITERIA = {}


def record_criterion(num, ok, detail=""):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    CRITERIA[num] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for num in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[num])


def sweep_matrix(i):
    """Matrix ``i`` of the acceptance corpus: at most 200x200, density at most 5%, values positive."""
    rng = np.random.default_rng(1000 + i)
    if i % 2 == 0:
        M, N = (int(v) for v in rng.integers(20, 201, 2))
        density = rng.uniform(0.005, 0.05)
        return gen_uniform(M, N, max(1, int(density * M * N)), i, low=0.5, high=1.5)
    scale = int(rng.integers(5, 8))
    n = 1 << scale
    return gen_rmat(scale, max(1, int(rng.uniform(0.01, 0.05) * n * n)), i)


def positive_inputs(S, K, seed=0):
    rng = np.random.default_rng([seed, K])
    return rng.uniform(0.5, 1.5, (S.nrows, K)), rng.uniform(0.5, 1.5, (S.ncols, K))


def run_world(size, fn, *args, timeout=10.0):
    return World(size, timeout=timeout).run(fn, *args)


def rel_err(got, ref):
    got, ref = np.asarray(got), np.asarray(ref)
    if got.size == 0:
        return 0.0
    scale = np.abs(ref)
    err = np.abs(got - ref)
    return float(np.max(np.divide(err, scale, out=err.copy(), where=scale > 0)))


@pytest.fixture
def small_rmat():
    return gen_rmat(6, 300, 5)
