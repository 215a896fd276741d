import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tileattn import PlanCache, Shape, make_input  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def cache():
    return PlanCache()


@pytest.fixture
def small_input():
    return make_input(Shape(2, 2, 40, 16), "f32", seed=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
