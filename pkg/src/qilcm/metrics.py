"""Ranking metrics, per-run reports and significance testing."""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractViolation, DomainError

METRIC_PATTERN = re.compile(r"^(ndcg|p)@([1-9][0-9]*)$")
DEFAULT_METRICS = ("ndcg@1", "ndcg@3", "ndcg@5", "ndcg@10")
REPORT_METRICS = ("ndcg@1", "ndcg@3", "ndcg@5", "ndcg@10", "ndcg@50", "p@1", "p@5")


def rank_order(scores) -> np.ndarray:
    """Indices by descending score, ties to the lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def dcg_at_k(labels_in_rank_order, k: int) -> float:
    rel = np.asarray(labels_in_rank_order, dtype=np.float64)[:k]
    return float(np.sum((2.0**rel - 1.0) / np.log2(np.arange(2, rel.size + 2))))


def ndcg_at_k(scores, labels, k: int, zero_idcg: float = 0.0) -> float:
    """NDCG@k with gain 2^l - 1 and log2(r + 1) discount.

    A list without relevant items has IDCG = 0 and scores ``zero_idcg``
    (pass ``math.nan`` to mark it for exclusion from averages).
    """
    scores, labels = np.asarray(scores), np.asarray(labels)
    if k < 1:
        raise DomainError("k must be >= 1")
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ContractViolation(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    ideal = dcg_at_k(np.sort(labels)[::-1], k)
    if ideal == 0:
        return zero_idcg
    return dcg_at_k(labels[rank_order(scores)], k) / ideal


def precision_at_k(scores, labels, k: int, denominator: str = "k") -> float:
    """Fraction of the top k that is relevant; ``denominator='min'`` divides by min(k, n)."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ContractViolation("scores and labels must be equal-length vectors")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractViolation("precision@k needs binary labels")
    if k < 1:
        raise DomainError("k must be >= 1")
    hits = float(labels[rank_order(scores)][:k].sum())
    if denominator == "k":
        return hits / k
    if denominator == "min":
        return hits / min(k, labels.size)
    raise ValueError(f"unknown denominator {denominator!r}")


def parse_metric(token: str) -> tuple[str, int]:
    m = METRIC_PATTERN.match(token.strip().lower())
    if not m:
        raise ValueError(f"unknown metric {token!r}; expected ndcg@K or p@K")
    return m.group(1), int(m.group(2))


def metric_fn(token: str):
    """Metric callable ``f(scores, labels)``; p@k counts any positive grade as relevant."""
    kind, k = parse_metric(token)
    if kind == "ndcg":
        return lambda s, y: ndcg_at_k(s, y, k)
    return lambda s, y: precision_at_k(s, (np.asarray(y) > 0).astype(np.int64), k)


@dataclass
class MetricReport:
    qids: list[int]
    per_query: dict[str, list[float]]
    run_id: str = ""
    seed: int | None = None
    aggregate: dict[str, float] = field(init=False)

    def __post_init__(self):
        self.aggregate = {m: float(np.mean(v)) if v else 0.0 for m, v in self.per_query.items()}

    @property
    def n_queries(self) -> int:
        return len(self.qids)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "n_queries": self.n_queries,
            "aggregate": self.aggregate,
            "qids": self.qids,
            "per_query": self.per_query,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def report_from_scores(
    qids: Sequence[int],
    scores: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    metrics: Sequence[str] = DEFAULT_METRICS,
    run_id: str = "",
    seed: int | None = None,
) -> MetricReport:
    fns = {m: metric_fn(m) for m in metrics}
    pairs = sorted(zip(qids, scores, labels), key=lambda t: t[0])
    per_query = {m: [fn(s, y) for _, s, y in pairs] for m, fn in fns.items()}
    return MetricReport([q for q, _, _ in pairs], per_query, run_id, seed)


def evaluate(bundle, dataset, metrics: Sequence[str] = DEFAULT_METRICS, threads: int = 1, run_id: str = "") -> MetricReport:
    """Score every query of ``dataset`` with a model bundle and report metrics.

    Aggregation runs in qid order regardless of ``threads``.
    """
    for m in metrics:
        parse_metric(m)
    bundle.check_dataset(dataset)
    groups = list(dataset.groups)
    if threads > 1 and len(groups) > 1:
        chunks = [groups[i::threads] for i in range(threads)]
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(bundle.score, chunks))
        ordered = {}
        for chunk, part in zip(chunks, parts):
            ordered.update({grp.qid: s for grp, s in zip(chunk, part)})
        scores = [ordered[grp.qid] for grp in groups]
    else:
        scores = bundle.score(groups)
    return report_from_scores([g.qid for g in groups], scores, [g.labels for g in groups], metrics, run_id, bundle.seed)


def format_table(reports: Mapping[str, MetricReport], metrics: Sequence[str] | None = None, extra: Mapping[str, Mapping[str, str]] | None = None) -> str:
    """Aligned metric x model table; ``extra`` adds columns like P-values."""
    names = list(reports)
    metrics = list(metrics or next(iter(reports.values())).per_query)
    extra = extra or {}
    header = ["Metrics", *names, *extra]
    rows = [header]
    for m in metrics:
        row = [m.upper()]
        row += [f"{reports[n].aggregate[m]:.4f}" for n in names]
        row += [extra[col].get(m, "") for col in extra]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows)


# ---------------------------------------------------------------------------
# Student's t-test
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise DomainError("betainc: x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_test(sample_a, sample_b, paired: bool = False) -> tuple[float, float]:
    """Two-sided Student's t-test; pooled-variance unless ``paired``."""
    a, b = np.asarray(sample_a, dtype=np.float64), np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DomainError("each sample needs at least 2 values")
    if paired:
        if a.size != b.size:
            raise DomainError("paired t-test needs equal-length samples")
        d = a - b
        df = d.size - 1
        diff, se2 = d.mean(), d.var(ddof=1) / d.size
    else:
        df = a.size + b.size - 2
        pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / df
        diff, se2 = a.mean() - b.mean(), pooled * (1.0 / a.size + 1.0 / b.size)
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = float(diff / math.sqrt(se2))
    return t, t_sf_two_sided(t, df)
