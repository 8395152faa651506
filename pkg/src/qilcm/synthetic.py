"""Synthetic list data with per-query feature shifts and scales.

Items of query q are drawn as ``x = mu_q + scale_q * z`` with ``z`` standard
normal. Relevance depends only on each item's standardized position inside
its own list (distance from the list centre in the first two features,
measured in per-list standard deviations), so a ranker that normalizes
per query can transfer to queries whose ``mu_q`` or ``scale_q`` were never
seen in training. The remaining features are distractors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, FeatureSchema, QueryGroup, apply_normalizer, fit_normalizer

LABEL_EDGES = (0.5, 0.9, 1.3, 1.7)  # standardized radius thresholds for labels 4, 3, 2, 1


def relevance_labels(features: np.ndarray, n_relevant: int = 2) -> np.ndarray:
    """Graded labels from the standardized radius over the first features."""
    rel = features[:, :n_relevant]
    sd = rel.std(axis=0)
    dev = (rel - rel.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    r = np.sqrt((dev**2).sum(axis=1))
    return (len(LABEL_EDGES) - np.searchsorted(LABEL_EDGES, r, side="right")).astype(np.int64)


def make_queries(
    n_queries: int,
    rng: np.random.Generator,
    n_items: int = 10,
    n_features: int = 6,
    shift_sd: float = 1.0,
    shift_offset: float = 0.0,
    log_scale_sd: float = 0.4,
    qid_start: int = 1,
) -> list[QueryGroup]:
    """Draw queries; ``shift_offset`` pushes every mean that far from the origin
    along a random sign pattern (a far-shifted stratum)."""
    groups = []
    for j in range(n_queries):
        mu = rng.normal(0.0, shift_sd, n_features)
        if shift_offset:
            mu += shift_offset * rng.choice([-1.0, 1.0], n_features)
        scale = np.exp(rng.normal(0.0, log_scale_sd, n_features))
        x = mu + scale * rng.standard_normal((n_items, n_features))
        groups.append(QueryGroup(qid_start + j, x, relevance_labels(x)))
    return groups


@dataclass
class ShiftedBenchmark:
    train: Dataset
    valid: Dataset
    test: Dataset  # shifted queries
    far: Dataset  # far-shifted stratum

    @property
    def test_with_far(self) -> Dataset:
        return Dataset(self.test.groups + self.far.groups, self.test.schema, self.test.normalizer)


def shifted_benchmark(
    seed: int,
    n_train: int = 160,
    n_valid: int = 40,
    n_test: int = 100,
    n_far: int = 50,
    n_items: int = 10,
    n_features: int = 6,
    test_shift_sd: float = 1.5,
    far_offset: float = 3.0,
) -> ShiftedBenchmark:
    """Train/valid from the base distribution; test and far strata shifted.

    Features are min-max normalized with statistics of the training split.
    """
    rng = np.random.default_rng(seed)
    schema = FeatureSchema(n_numeric=n_features)
    kw = dict(n_items=n_items, n_features=n_features)
    train = make_queries(n_train, rng, qid_start=1, **kw)
    valid = make_queries(n_valid, rng, qid_start=10_001, **kw)
    test = make_queries(n_test, rng, shift_sd=test_shift_sd, log_scale_sd=0.6, qid_start=20_001, **kw)
    far = make_queries(n_far, rng, shift_sd=0.5, shift_offset=far_offset, log_scale_sd=0.6, qid_start=30_001, **kw)
    raw_train = Dataset(tuple(train), schema)
    norm = fit_normalizer(raw_train)
    return ShiftedBenchmark(
        *(apply_normalizer(Dataset(tuple(gs), schema), norm) for gs in (train, valid, test, far))
    )
