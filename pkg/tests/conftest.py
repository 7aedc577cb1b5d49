import numpy as np
import pytest

from gnnwr.geodata import SpatialDataset

ACCEPTANCE = []


def random_dataset(n, p, seed, noise=0.5, extent=10_000.0):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, extent, (n, 2))
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p))])
    beta = rng.uniform(-2, 2, p + 1)
    y = X @ beta + noise * rng.standard_normal(n)
    return SpatialDataset(X=X, y=y, names=tuple(f"v{j}" for j in range(1, p + 1)), coords=coords)


@pytest.fixture
def small_ds():
    return random_dataset(40, 2, seed=3)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
