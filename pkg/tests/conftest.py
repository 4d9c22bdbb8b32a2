import numpy as np
import pytest

from octree_nca.grid import CellGrid
from octree_nca.model import init_weights


def random_weights(dim, channels=16, hidden=64, seed=0, scale=0.1, dtype=np.float32):
    """Initialized weights with a non-zero output layer and bias."""
    rng = np.random.default_rng([seed, 99])
    w = init_weights(dim, channels, hidden, seed)
    w.w2[...] = rng.normal(0, scale, w.w2.shape)
    w.b1[...] = rng.normal(0, scale, w.b1.shape)
    return w.astype(dtype)


def random_state(dims, channels=16, image_channels=1, seed=0, dtype=np.float32):
    rng = np.random.default_rng([seed, 17])
    return CellGrid(rng.random(tuple(dims) + (channels,)).astype(dtype), image_channels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember the outcome of one acceptance criterion for the summary."""
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
