import numpy as np
import pytest

from prestrain.grid import Grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid16():
    return Grid.square(16)


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acc.RESULTS):
            terminalreporter.write_line(acc.RESULTS[n])
