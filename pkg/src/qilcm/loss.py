"""Training objective: listwise cross-entropy plus a Chamfer query-confusion term."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import QueryGroup
from .diffcore import Segments, Tensor
from .errors import DomainError
from .model import BatchForward, ModelConfig

LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class LossBreakdown:
    rank_loss: float
    conf_loss: float
    total: float
    pair_count: int


def normalize_labels(y) -> np.ndarray:
    """exp(y) for positive labels, 0 otherwise, normalized to sum to 1."""
    y = np.asarray(y, dtype=np.float64)
    psi = np.where(y > 0, np.exp(np.where(y > 0, y, 0.0)), 0.0)
    total = psi.sum()
    if total <= 0:
        raise DomainError("label distribution undefined: every label is zero")
    return psi / total


def attrank_loss_value(scores: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    """Plain-array form of the ranking loss over a batch of queries."""
    if not scores:
        raise DomainError("empty batch")
    per_query = [
        -np.sum(np.asarray(t) * np.log(np.maximum(np.asarray(s), LOG_FLOOR))) / len(s)
        for s, t in zip(scores, targets)
    ]
    return float(np.mean(per_query))


def attrank_loss(s: Tensor, targets: Sequence[np.ndarray], seg: Segments) -> Tensor:
    """(1/|B|) Σ_q -(1/n_q) Σ_i ỹ_i log s_i on stacked scores ``s``."""
    lengths = np.asarray(seg.lengths, dtype=np.float64)
    w = np.concatenate(targets) / (lengths[seg.ids] * seg.count)
    return dc.sum(dc.hadamard(s.graph.constant(-w), dc.log_clamped(s, LOG_FLOOR)))


def chamfer_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared nearest-neighbour distances, both directions."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DomainError("chamfer distance of an empty set")
    d = dc.pairwise_sqdist(a, b)
    return dc.add(dc.sum(dc.min_axis(d, 1)), dc.sum(dc.min_axis(d, 0)))


def chamfer_value(a, b) -> float:
    """Chamfer distance between two point sets given as arrays of rows."""
    a, b = (np.asarray(v, dtype=np.float64) for v in (a, b))
    if a.size == 0 or b.size == 0:
        raise DomainError("chamfer distance of an empty set")
    # a flat array is a set of scalars
    a, b = (v[:, None] if v.ndim == 1 else v for v in (a, b))
    g = dc.Graph()
    return float(chamfer_distance(g.constant(a), g.constant(b)).value)


def confusion_loss(
    h_bar: Tensor,
    seg: Segments,
    n_pairs: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, int]:
    """Mean Chamfer distance over ordered query pairs of a batch.

    Self-pairs count in the 1/|B|^2 normalization and contribute zero. With
    ``n_pairs`` set, that many unordered pairs are sampled and the sum is
    rescaled to an unbiased estimate of the full double sum.
    Returns the loss and the number of distinct-query pairs evaluated.
    """
    g = h_bar.graph
    nq = seg.count
    if nq == 1:
        return g.constant(0.0), 0
    all_pairs = nq * (nq - 1) // 2
    if n_pairs is None or n_pairs >= all_pairs:
        # Row i, column q: min distance from item i to query q's items; both
        # Chamfer directions of every ordered pair add up to twice the total.
        d = dc.pairwise_sqdist(h_bar, h_bar)
        nearest = dc.segment_min_cols(d, seg)
        mask = np.ones(nearest.shape)
        mask[np.arange(seg.total), seg.ids] = 0.0
        total = dc.sum(dc.hadamard(nearest, g.constant(mask)))
        return dc.scale(total, 2.0 / nq**2), nq * (nq - 1)
    rng = rng or np.random.default_rng(0)
    pairs = list(combinations(range(nq), 2))
    chosen = sorted(rng.choice(len(pairs), size=n_pairs, replace=False).tolist())
    terms = []
    for idx in chosen:
        q1, q2 = pairs[idx]
        a = dc.gather_rows(h_bar, np.arange(seg.slice(q1).start, seg.slice(q1).stop))
        b = dc.gather_rows(h_bar, np.arange(seg.slice(q2).start, seg.slice(q2).stop))
        terms.append(dc.reshape(chamfer_distance(a, b), (1,)))
    total = dc.sum(dc.concat(terms, axis=0))
    return dc.scale(total, 2.0 * all_pairs / (n_pairs * nq**2)), 2 * n_pairs


def total_loss(
    fb: BatchForward,
    groups: Sequence[QueryGroup],
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Ranking loss plus ``lambda_conf`` times the confusion loss."""
    targets = [normalize_labels(grp.labels) for grp in groups]
    rank = attrank_loss(fb.s, targets, fb.seg)
    if config.lambda_conf == 0:
        return rank, LossBreakdown(float(rank.value), 0.0, float(rank.value), 0)
    conf, pairs = confusion_loss(fb.h_bar, fb.seg, config.conf_pairs, rng)
    total = dc.scale_add(rank, conf, 1.0, config.lambda_conf)
    return total, LossBreakdown(float(rank.value), float(conf.value), float(total.value), pairs)
