import sys

import numpy as np
import pytest

from shelfmip import model


@pytest.fixture(scope="session")
def scene3():
    """A 2+1 instance and its reference solution."""
    return model.generate_scene(3, n_books=3)


@pytest.fixture(scope="session")
def scene4():
    return model.generate_scene(0, n_books=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
