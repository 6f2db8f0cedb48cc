import numpy as np
import pytest

from scenemrf.graph import Edge, Node, QueryGraph, random_scene_mrf
from scenemrf.trees import random_tree_query


def chain(n, rel=0):
    nodes = [Node(i, 0) for i in range(1, n + 1)]
    return QueryGraph(nodes, [Edge(i, i + 1, rel) for i in range(1, n)])


def cycle(n, rel=0):
    nodes = [Node(i, 0) for i in range(1, n + 1)]
    edges = [Edge(i, i % n + 1, rel) for i in range(1, n + 1)]
    return QueryGraph(nodes, edges)


def random_tree_mrf(rng, max_nodes=6, max_boxes=8, low=-3.0, high=3.0):
    n = int(rng.integers(1, max_nodes + 1))
    nb = int(rng.integers(1, max_boxes + 1))
    return random_scene_mrf(random_tree_query(n, rng), nb, rng, low, high)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
