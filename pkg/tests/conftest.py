import numpy as np
import pytest

from cfag.graph import TripartiteGraph
from cfag.training import BprBatch


def toy_graph() -> TripartiteGraph:
    """5 users, 4 groups, 4 items; every node has at least one neighbor."""
    return TripartiteGraph(
        5, 4, 4,
        [(0, 0), (0, 1), (1, 1), (2, 2), (3, 0), (3, 3), (4, 2)],
        [(0, 0), (1, 1), (1, 2), (2, 3), (3, 0), (4, 1), (4, 3)],
        [(0, 0), (1, 2), (2, 3), (3, 1), (3, 0)],
    )


def toy_batch() -> BprBatch:
    return BprBatch(np.array([0, 1, 2, 3, 4, 0]), np.array([0, 1, 2, 3, 2, 1]), np.array([2, 3, 0, 1, 0, 3]))


@pytest.fixture
def graph():
    return toy_graph()


@pytest.fixture
def batch():
    return toy_batch()


# acceptance criteria register one line each; printed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
