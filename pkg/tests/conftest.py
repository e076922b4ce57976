"""Shared fixtures and the acceptance report hook."""

from __future__ import annotations

import numpy as np
import pytest

from carpose.library import default_library
from carpose.sim import default_intrinsics

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def library():
    return default_library()


@pytest.fixture(scope="session")
def K():
    return default_intrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
