import numpy as np
import pytest

from unifield.datasets import synthetic_registry


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def registry():
    return synthetic_registry()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
