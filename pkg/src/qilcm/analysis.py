"""Anomalous-query analysis.

Each query becomes a vector (mean numeric features of its top-k items), an
isolation forest fitted on training queries scores how unusual each test
query is, and test queries are bucketed by that score to compare two models.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, FeatureSchema, QueryGroup, initial_ranking
from .errors import ContractViolation, DomainError
from .metrics import metric_fn

EULER_GAMMA = 0.5772156649015329


def query_vector(group: QueryGroup, schema: FeatureSchema, initial_scores=None, k: int = 10) -> np.ndarray:
    """Mean numeric feature row over the query's top-min(k, n_q) items.

    Items are ranked by ``initial_scores`` (indexed by item id) when given,
    else by the group's stored initial order, else by file order. The
    initial-order column itself is excluded.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    cols = schema.file_numeric_columns
    if initial_scores is not None:
        s = np.asarray(initial_scores, dtype=np.float64)[group.item_ids]
        order = initial_ranking(s, group.item_ids)
    elif group.initial_order is not None:
        order = np.argsort(group.initial_order, kind="stable")
    else:
        order = np.argsort(group.item_ids, kind="stable")
    top = order[: min(k, group.n_items)]
    return group.features[np.ix_(top, cols)].mean(axis=0)


def query_vectors(ds: Dataset, initial_scores: Mapping[int, np.ndarray] | None = None, k: int = 10) -> np.ndarray:
    return np.stack(
        [query_vector(g, ds.schema, None if initial_scores is None else initial_scores[g.qid], k) for g in ds]
    )


# ---------------------------------------------------------------------------
# Isolation forest
# ---------------------------------------------------------------------------


def harmonic(n: int) -> float:
    if n < 1:
        return 0.0
    if n <= 10_000:
        return math.fsum(1.0 / i for i in range(1, n + 1))
    return math.log(n) + EULER_GAMMA + 1.0 / (2 * n) - 1.0 / (12 * n * n)


def average_path_length(n: int) -> float:
    """Mean unsuccessful-search path length in a BST of ``n`` keys."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass
class IsolationTree:
    """Array-encoded tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray
    lo: np.ndarray  # node-local range of the split feature
    hi: np.ndarray

    @property
    def height(self) -> int:
        return int(self.depth.max())

    def path_length(self, x: np.ndarray) -> float:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] < self.threshold[node] else self.right[node]
        return float(self.depth[node]) + average_path_length(int(self.size[node]))


def _grow_tree(data: np.ndarray, height_cap: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size, depth, lo, hi = ([] for _ in range(8))

    def new_node(n, d):
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (size, n), (depth, d), (lo, 0.0), (hi, 0.0)):
            lst.append(v)
        return len(feature) - 1

    stack = [(np.arange(data.shape[0]), 0, new_node(data.shape[0], 0))]
    while stack:
        idx, d, node = stack.pop()
        if d >= height_cap or idx.size <= 1:
            continue
        sub = data[idx]
        mins, maxs = sub.min(axis=0), sub.max(axis=0)
        splittable = np.flatnonzero(maxs > mins)
        if splittable.size == 0:
            continue
        f = int(rng.choice(splittable))
        t = float(rng.uniform(mins[f], maxs[f]))
        if t <= mins[f]:  # keep both children non-empty
            t = float(np.nextafter(mins[f], maxs[f]))
        mask = sub[:, f] < t
        feature[node], threshold[node], lo[node], hi[node] = f, t, float(mins[f]), float(maxs[f])
        li, ri = idx[mask], idx[~mask]
        left[node] = new_node(li.size, d + 1)
        right[node] = new_node(ri.size, d + 1)
        stack.append((ri, d + 1, right[node]))
        stack.append((li, d + 1, left[node]))
    return IsolationTree(*(np.asarray(v) for v in (feature, threshold, left, right, size, depth, lo, hi)))


@dataclass
class IsolationForest:
    trees: list[IsolationTree]
    subsample: int
    n_features: int
    degenerate: bool = False

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def mean_path_length(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_features,):
            raise ContractViolation(f"vector of shape {x.shape}, forest expects ({self.n_features},)")
        return float(np.mean([t.path_length(x) for t in self.trees]))


def fit_isolation_forest(
    vectors,
    n_trees: int = 100,
    subsample: int = 256,
    seed: int = 0,
    threads: int = 1,
) -> IsolationForest:
    """Grow ``n_trees`` isolation trees on seeded random subsamples."""
    data = np.asarray(vectors, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise DomainError("isolation forest needs at least 2 vectors")
    if n_trees < 1:
        raise DomainError("n_trees must be >= 1")
    psi = min(subsample, data.shape[0])
    cap = math.ceil(math.log2(psi))
    degenerate = bool(np.all(data.max(axis=0) == data.min(axis=0)))
    if degenerate:
        warnings.warn("isolation forest: data are constant; every anomaly score will be 0.5", RuntimeWarning, stacklevel=2)
    seeds = np.random.SeedSequence(seed).spawn(n_trees)

    def grow(ss):
        rng = np.random.default_rng(ss)
        rows = rng.choice(data.shape[0], size=psi, replace=False)
        return _grow_tree(data[rows], cap, rng)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(grow, seeds))
    else:
        trees = [grow(ss) for ss in seeds]
    return IsolationForest(trees, psi, data.shape[1], degenerate)


def score_from_path_length(mean_path: float, subsample: int) -> float:
    return 2.0 ** (-mean_path / average_path_length(subsample))


def anomaly_score(forest: IsolationForest, vector) -> float:
    """2^(-E[h(x)] / c(psi)); near 1 is anomalous, about 0.5 is ordinary."""
    return score_from_path_length(forest.mean_path_length(vector), forest.subsample)


# ---------------------------------------------------------------------------
# Gap reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GapBucket:
    score_min: float
    score_max: float
    count: int
    metric_a: float
    metric_b: float

    @property
    def gap(self) -> float:
        return self.metric_a - self.metric_b


@dataclass
class GapReport:
    metric: str
    buckets: list[GapBucket]

    @property
    def total(self) -> int:
        return sum(b.count for b in self.buckets)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "buckets": [
                {
                    "bucket": i,
                    "score_min": b.score_min,
                    "score_max": b.score_max,
                    "count": b.count,
                    "metric_a": b.metric_a,
                    "metric_b": b.metric_b,
                    "gap": b.gap,
                }
                for i, b in enumerate(self.buckets)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "score_min", "score_max", "count", "metric_a", "metric_b", "gap"])
        for row in self.to_dict()["buckets"]:
            w.writerow(list(row.values()))
        return buf.getvalue()

    def to_gnuplot(self) -> str:
        """Whitespace-separated columns for a bar chart of gap per bucket."""
        lines = [f"# bucket mid_score gap  ({self.metric})"]
        for i, b in enumerate(self.buckets):
            lines.append(f"{i} {(b.score_min + b.score_max) / 2:.6f} {b.gap:.6f}")
        return "\n".join(lines) + "\n"


def bucket_by_score(scores: Sequence[float], qids: Sequence[int], n_buckets: int) -> list[np.ndarray]:
    """Equal-count buckets of positions, ordered by (score, qid)."""
    if n_buckets < 2:
        raise DomainError("n_buckets must be >= 2")
    if len(scores) < n_buckets:
        raise DomainError(f"{len(scores)} queries cannot fill {n_buckets} buckets")
    order = np.lexsort((np.asarray(qids), np.asarray(scores)))
    return np.array_split(order, n_buckets)


def gap_report(
    model_a,
    model_b,
    test_ds: Dataset,
    forest: IsolationForest,
    metric: str = "ndcg@1",
    n_buckets: int = 5,
    k: int = 10,
    initial_scores: Mapping[int, np.ndarray] | None = None,
) -> GapReport:
    """Per-anomaly-bucket mean metric of two models and their difference (a - b)."""
    fn = metric_fn(metric)
    model_a.check_dataset(test_ds)
    model_b.check_dataset(test_ds)
    vecs = query_vectors(test_ds, initial_scores, k)
    scores = np.array([anomaly_score(forest, v) for v in vecs])
    groups = list(test_ds.groups)
    if len(groups) < n_buckets:
        raise DomainError(f"{len(groups)} queries cannot fill {n_buckets} buckets")
    sa, sb = model_a.score(groups), model_b.score(groups)
    va = np.array([fn(s, g.labels) for s, g in zip(sa, groups)])
    vb = np.array([fn(s, g.labels) for s, g in zip(sb, groups)])
    buckets = []
    for pos in bucket_by_score(scores, test_ds.qids, n_buckets):
        buckets.append(GapBucket(float(scores[pos].min()), float(scores[pos].max()), int(pos.size), float(va[pos].mean()), float(vb[pos].mean())))
    return GapReport(metric, buckets)
