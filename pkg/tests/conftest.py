import numpy as np
import pytest

from qilcm.data import Dataset, FeatureSchema, QueryGroup

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(rng, n_queries=6, n_features=4, min_items=2, max_items=7, qid_start=1):
    """Queries with features in [0, 1] and at least one relevant item each."""
    groups = []
    for q in range(n_queries):
        n = int(rng.integers(min_items, max_items + 1))
        labels = rng.integers(0, 3, n)
        labels[rng.integers(n)] = 2
        groups.append(QueryGroup(qid_start + q, rng.random((n, n_features)), labels))
    return Dataset(tuple(groups), FeatureSchema(n_numeric=n_features))
