import numpy as np
import pytest

from strominger.spectral_forms import Lattice

# (criterion, status, detail) lines collected by the acceptance tests
ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def lat():
    return Lattice(8, ("x1", "x2"))


@pytest.fixture
def lat4():
    return Lattice(4, ("x1", "x2"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(f"{crit}: {status}  {detail}")
