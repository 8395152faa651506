import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from qilcm.data import Dataset, FeatureSchema, QueryGroup
from qilcm.errors import ContractViolation, DomainError, SchemaError
from qilcm.metrics import (
    MetricReport,
    betainc,
    evaluate,
    format_table,
    metric_fn,
    ndcg_at_k,
    parse_metric,
    precision_at_k,
    report_from_scores,
    t_test,
)


class StubBundle:
    """Scores items with a fixed function of their features."""

    def __init__(self, schema, fn, seed=None):
        self.schema, self.fn, self.seed = schema, fn, seed
        self.normalizer = None

    def check_dataset(self, ds):
        if ds.schema != self.schema:
            raise SchemaError("schema mismatch")

    def score(self, groups):
        return [self.fn(g) for g in groups]


# NDCG ---------------------------------------------------------------------------


def test_ndcg_examples():
    assert ndcg_at_k([3.0, 2.0, 1.0], [2, 1, 0], 3) == 1.0
    assert ndcg_at_k([0.1, 0.9], [0, 0], 2) == 0.0
    assert math.isnan(ndcg_at_k([0.1, 0.9], [0, 0], 2, zero_idcg=math.nan))
    value = ndcg_at_k([0.0, 1.0], [1, 0], 2)
    assert math.isclose(value, 1 / math.log2(3), rel_tol=1e-15)
    assert round(value, 4) == 0.6309


def test_ndcg_ties_go_to_lower_index():
    assert ndcg_at_k([0.5, 0.5], [0, 1], 1) == 0.0
    assert ndcg_at_k([0.5, 0.5], [1, 0], 1) == 1.0


def test_ndcg_contract():
    with pytest.raises(ContractViolation):
        ndcg_at_k([0.1, 0.2], [1], 1)
    with pytest.raises(DomainError):
        ndcg_at_k([0.1], [1], 0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=8), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_ndcg_invariant_to_monotone_transform(labels, k, seed):
    scores = np.random.default_rng(seed).normal(size=len(labels))
    base = ndcg_at_k(scores, labels, k)
    assert 0.0 <= base <= 1.0
    assert ndcg_at_k(np.exp(scores) * 3 + 1, labels, k) == base
    assert precision_at_k(np.tanh(scores), np.minimum(labels, 1), k) == precision_at_k(scores, np.minimum(labels, 1), k)


def test_ndcg_never_drops_when_better_item_moves_up():
    for n in range(2, 6):
        for labels in itertools.product(range(3), repeat=n):
            for perm in itertools.permutations(range(n)):
                scores = -np.asarray(perm, dtype=float)  # item perm[j] is ranked ... by position
                order = np.argsort(perm)
                for r in range(n - 1):
                    hi, lo = order[r], order[r + 1]
                    if labels[lo] > labels[hi]:
                        swapped = scores.copy()
                        swapped[[hi, lo]] = swapped[[lo, hi]]
                        for k in (1, 2, n):
                            assert ndcg_at_k(swapped, labels, k) >= ndcg_at_k(scores, labels, k) - 1e-15


# precision -------------------------------------------------------------------------


def test_precision_examples():
    assert precision_at_k([0.9, 0.1], [1, 0], 1) == 1.0
    assert precision_at_k([0.9, 0.1, 0.4], [0, 0, 0], 2) == 0.0
    assert precision_at_k([5, 4, 3, 2, 1], [0, 0, 1, 0, 0], 5) == 0.2
    assert precision_at_k([0.2, 0.1], [1, 1], 5) == 0.4
    assert precision_at_k([0.2, 0.1], [1, 1], 5, denominator="min") == 1.0
    with pytest.raises(ContractViolation):
        precision_at_k([0.2, 0.1], [2, 0], 1)


def test_metric_tokens():
    assert parse_metric("NDCG@10") == ("ndcg", 10)
    assert parse_metric("p@5") == ("p", 5)
    for bad in ("map", "ndcg@0", "p@", "err@3"):
        with pytest.raises(ValueError):
            parse_metric(bad)
    # graded labels count as relevant when positive
    assert metric_fn("p@1")([0.9, 0.1], [3, 0]) == 1.0


# reports and evaluation ----------------------------------------------------------------


def test_report_aggregates_and_sorts_by_qid():
    rep = report_from_scores([3, 1], [np.array([0.1, 0.9]), np.array([0.9, 0.1])], [np.array([1, 0]), np.array([1, 0])], ["ndcg@1"])
    assert rep.qids == [1, 3]
    assert rep.per_query["ndcg@1"] == [1.0, 0.0]
    assert rep.aggregate["ndcg@1"] == 0.5
    doc = json.loads(rep.to_json())
    assert doc["n_queries"] == 2 and doc["aggregate"] == {"ndcg@1": 0.5}


def test_evaluate_separable_toy_model(rng):
    schema = FeatureSchema(1)
    groups = []
    for q in range(10):
        labels = rng.integers(0, 4, 6)
        groups.append(QueryGroup(q, labels[:, None] / 4.0, labels))
    ds = Dataset(tuple(groups), schema)
    rep = evaluate(StubBundle(schema, lambda g: g.features[:, 0]), ds, ["ndcg@1", "ndcg@3", "ndcg@5", "ndcg@10"])
    assert all(v == 1.0 for v in rep.aggregate.values())


def test_evaluate_random_scores_p_at_1_binomial_band():
    rng = np.random.default_rng(8)
    schema = FeatureSchema(1)
    n = 2000
    ds = Dataset(tuple(QueryGroup(q, np.zeros((2, 1)), [1, 0]) for q in range(n)), schema)
    rep = evaluate(StubBundle(schema, lambda g: rng.random(2)), ds, ["p@1"])
    assert abs(rep.aggregate["p@1"] - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_evaluate_threads_do_not_change_results(rng):
    schema = FeatureSchema(2)
    ds = Dataset(tuple(QueryGroup(q, rng.random((5, 2)), rng.integers(0, 3, 5)) for q in range(13)), schema)
    bundle = StubBundle(schema, lambda g: g.features @ np.array([1.0, -0.5]))
    one, four = evaluate(bundle, ds, ["ndcg@3"], threads=1), evaluate(bundle, ds, ["ndcg@3"], threads=4)
    assert one.to_json() == four.to_json()


def test_evaluate_rejects_schema_mismatch(rng):
    ds = Dataset((QueryGroup(1, rng.random((2, 2)), [1, 0]),), FeatureSchema(2))
    with pytest.raises(SchemaError):
        evaluate(StubBundle(FeatureSchema(3), lambda g: np.zeros(g.n_items)), ds, ["ndcg@1"])


def test_format_table_layout():
    rep_a = MetricReport([1], {"ndcg@1": [0.5], "p@1": [1.0]})
    rep_b = MetricReport([1], {"ndcg@1": [0.25], "p@1": [0.0]})
    table = format_table({"QILCM": rep_a, "V3": rep_b}, extra={"P-value": {"ndcg@1": "0.01"}})
    lines = table.splitlines()
    assert lines[0].split() == ["Metrics", "QILCM", "V3", "P-value"]
    assert lines[1].split() == ["NDCG@1", "0.5000", "0.2500", "0.01"]
    assert lines[2].split() == ["P@1", "1.0000", "0.0000"]


# t-test ----------------------------------------------------------------------------


def test_t_test_reference_example():
    t, p = t_test([2.1, 2.0, 1.9], [1.1, 1.0, 0.9])
    ref = stats.ttest_ind([2.1, 2.0, 1.9], [1.1, 1.0, 0.9])
    assert round(t, 2) == 12.25
    assert math.isclose(t, ref.statistic, rel_tol=1e-12)
    assert math.isclose(p, ref.pvalue, rel_tol=1e-9)


def test_t_test_degenerate_cases():
    assert t_test([0.3, 0.3, 0.3], [0.3, 0.3, 0.3]) == (0.0, 1.0)
    t, p = t_test([1, 1, 1], [0, 0, 0])
    assert p == 0.0 and t == math.inf
    with pytest.raises(DomainError):
        t_test([1.0], [1.0, 2.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 25), st.integers(2, 25), st.integers(0, 2**31 - 1), st.booleans())
def test_t_test_matches_scipy_and_is_symmetric(na, nb, seed, paired):
    rng = np.random.default_rng(seed)
    if paired:
        nb = na
    a, b = rng.normal(0.3, 1.0, na), rng.normal(0.0, 2.0, nb)
    t, p = t_test(a, b, paired=paired)
    ref = stats.ttest_rel(a, b) if paired else stats.ttest_ind(a, b)
    assert math.isclose(t, ref.statistic, rel_tol=1e-9)
    assert math.isclose(p, ref.pvalue, rel_tol=1e-8, abs_tol=1e-300)
    t2, p2 = t_test(b, a, paired=paired)
    assert t2 == -t and p2 == p


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 60), st.floats(0.1, 60), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    assert math.isclose(betainc(a, b, x), float(special.betainc(a, b, x)), rel_tol=1e-9, abs_tol=1e-14)
