import numpy as np
import pytest

from spekg.encoder import Model, build_neighbor_sets
from spekg.kg import KnowledgeGraph, Vocab

# Lines appended by tests/test_acceptance.py; echoed in the terminal summary so
# they are visible even when pytest captures stdout.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_triples():
    # 5 entities, 2 relations
    return np.array([[0, 0, 1], [1, 0, 2], [2, 1, 3], [3, 1, 4], [4, 0, 0], [1, 1, 3]], dtype=np.int64)


@pytest.fixture
def toy_graph(toy_triples):
    return KnowledgeGraph(toy_triples, Vocab.anonymous(5, 2))


@pytest.fixture
def toy_model(toy_triples):
    nb = build_neighbor_sets(toy_triples, 5, 2, np.ones(len(toy_triples)), top_m=8)
    return Model.initialise(5, 2, 4, nb, np.random.default_rng(3))
