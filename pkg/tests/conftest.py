import numpy as np
import pytest

from emmaseg.phantom import make_phantom

SMALL = (48, 48, 48)


def gain_free_rms(estimate: np.ndarray, truth: np.ndarray) -> float:
    """RMS deviation of ``estimate / truth`` from its own mean, relative to that mean."""
    r = estimate.astype(np.float64) / truth.astype(np.float64)
    return float(np.sqrt(np.mean((r / r.mean() - 1.0) ** 2)))


@pytest.fixture(scope="session")
def phantom():
    return make_phantom(0, 0, SMALL)


@pytest.fixture(scope="session")
def phantom_set():
    return [make_phantom(3, i, SMALL) for i in range(3)]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
