"""LETOR ingestion, feature schema, normalization, splitting and batching."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, DomainError, ParseError, SchemaError


@dataclass(frozen=True)
class CategoricalFeature:
    index: int  # 0-based column in the dense matrix (LETOR fid index + 1)
    cardinality: int
    dim: int

    @staticmethod
    def default_dim(cardinality: int) -> int:
        return min(16, math.ceil(cardinality / 2))


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout of the dense feature matrix.

    File columns are ``n_numeric + len(categorical)`` wide; categorical
    columns hold integer codes. When ``has_initial_order`` is set, one extra
    numeric column (rank / list length) is appended after the file columns.
    """

    n_numeric: int
    categorical: tuple[CategoricalFeature, ...] = ()
    has_initial_order: bool = False

    def __post_init__(self):
        if self.n_numeric < 0:
            raise SchemaError("n_numeric must be >= 0")
        idx = [c.index for c in self.categorical]
        if len(set(idx)) != len(idx):
            raise SchemaError(f"duplicate categorical column indices: {idx}")
        for c in self.categorical:
            if c.cardinality < 2:
                raise SchemaError(f"categorical column {c.index}: cardinality must be >= 2")
            if c.dim < 1:
                raise SchemaError(f"categorical column {c.index}: embedding dim must be >= 1")
            if not 0 <= c.index < self.n_file_columns:
                raise SchemaError(f"categorical column {c.index} outside {self.n_file_columns} columns")

    @property
    def n_file_columns(self) -> int:
        return self.n_numeric + len(self.categorical)

    @property
    def n_columns(self) -> int:
        return self.n_file_columns + int(self.has_initial_order)

    @property
    def categorical_columns(self) -> list[int]:
        return [c.index for c in self.categorical]

    @property
    def file_numeric_columns(self) -> list[int]:
        cat = set(self.categorical_columns)
        return [j for j in range(self.n_file_columns) if j not in cat]

    @property
    def numeric_columns(self) -> list[int]:
        cols = self.file_numeric_columns
        if self.has_initial_order:
            cols.append(self.n_file_columns)
        return cols

    @property
    def input_dim(self) -> int:
        """Width of the preprocessed encoder input (numeric + embeddings)."""
        return len(self.numeric_columns) + sum(c.dim for c in self.categorical)

    def to_dict(self) -> dict:
        return {
            "n_numeric": self.n_numeric,
            "categorical": [
                {"index": c.index, "cardinality": c.cardinality, "dim": c.dim} for c in self.categorical
            ],
            "has_initial_order": self.has_initial_order,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        unknown = set(d) - {"n_numeric", "categorical", "has_initial_order"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        if "n_numeric" not in d:
            raise SchemaError("schema requires n_numeric")
        cats = []
        for c in d.get("categorical", []):
            card = int(c["cardinality"])
            cats.append(CategoricalFeature(int(c["index"]), card, int(c.get("dim", CategoricalFeature.default_dim(card)))))
        return cls(int(d["n_numeric"]), tuple(cats), bool(d.get("has_initial_order", False)))

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"{path}: invalid schema file: {exc}") from None


@dataclass(frozen=True, eq=False)
class QueryGroup:
    """One query's candidate list: raw feature rows and relevance labels.

    ``item_ids`` are the items' positions in the source file's list for this
    query; they survive truncation and reordering.
    """

    qid: int
    features: np.ndarray
    labels: np.ndarray
    item_ids: np.ndarray | None = None
    initial_order: np.ndarray | None = None  # rank (0-based) of each row in the initial list

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise DataError(f"qid {self.qid}: feature matrix must be n_q x F with n_q >= 1")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (feats.shape[0],):
            raise DataError(f"qid {self.qid}: {feats.shape[0]} rows but {labels.size} labels")
        if np.any(labels < 0):
            raise DataError(f"qid {self.qid}: negative relevance label")
        ids = np.arange(len(labels)) if self.item_ids is None else np.asarray(self.item_ids, dtype=np.int64)
        if ids.shape != labels.shape:
            raise DataError(f"qid {self.qid}: item_ids length mismatch")
        if self.initial_order is not None:
            order = np.asarray(self.initial_order, dtype=np.int64)
            if sorted(order.tolist()) != list(range(len(labels))):
                raise DataError(f"qid {self.qid}: initial_order is not a permutation")
            object.__setattr__(self, "initial_order", order)
        for name, arr in (("features", feats), ("labels", labels), ("item_ids", ids)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_items(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, QueryGroup):
            return NotImplemented
        same_order = (self.initial_order is None) == (other.initial_order is None) and (
            self.initial_order is None or np.array_equal(self.initial_order, other.initial_order)
        )
        return (
            self.qid == other.qid
            and same_order
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("features", "labels", "item_ids"))
        )

    __hash__ = None


@dataclass(frozen=True)
class Normalizer:
    """Per-column min/max fitted on the training split."""

    columns: tuple[int, ...]
    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    def __post_init__(self):
        if not len(self.columns) == len(self.mins) == len(self.maxs):
            raise SchemaError("normalizer columns/mins/maxs length mismatch")
        if any(hi < lo for lo, hi in zip(self.mins, self.maxs)):
            raise SchemaError("normalizer max < min")

    def transform(self, features: np.ndarray) -> np.ndarray:
        out = np.array(features, dtype=np.float64)
        if not self.columns:
            return out
        cols = list(self.columns)
        lo, hi = np.asarray(self.mins), np.asarray(self.maxs)
        rng = hi - lo
        safe = np.where(rng > 0, rng, 1.0)
        scaled = np.where(rng > 0, (out[:, cols] - lo) / safe, 0.0)
        out[:, cols] = np.clip(scaled, 0.0, 1.0)
        return out

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mins": list(self.mins), "maxs": list(self.maxs)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Normalizer":
        return cls(tuple(int(c) for c in d["columns"]), tuple(map(float, d["mins"])), tuple(map(float, d["maxs"])))


@dataclass(frozen=True)
class Dataset:
    groups: tuple[QueryGroup, ...]
    schema: FeatureSchema
    normalizer: Normalizer | None = None
    line_qids: tuple[int, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        qids = [g.qid for g in self.groups]
        if len(set(qids)) != len(qids):
            raise DataError("duplicate qids in dataset")
        for g in self.groups:
            if g.features.shape[1] != self.schema.n_columns:
                raise SchemaError(
                    f"qid {g.qid}: {g.features.shape[1]} columns, schema expects {self.schema.n_columns}"
                )

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    @property
    def qids(self) -> list[int]:
        return [g.qid for g in self.groups]

    def by_qid(self) -> dict[int, QueryGroup]:
        return {g.qid: g for g in self.groups}

    def subset(self, qids: Sequence[int]) -> "Dataset":
        lookup = self.by_qid()
        return replace(self, groups=tuple(lookup[q] for q in qids), line_qids=None)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def parse_letor_line(line: str, lineno: int | None = None) -> tuple[int, int, dict[int, float]]:
    """Parse ``<label> qid:<id> <fid>:<val> ... [# comment]``."""
    body = line.split("#", 1)[0].split()
    if len(body) < 2:
        raise ParseError("expected '<label> qid:<id> ...'", lineno, line.strip())
    try:
        label = int(body[0])
    except ValueError:
        raise ParseError(f"bad label token {body[0]!r}", lineno, body[0]) from None
    if not body[1].startswith("qid:"):
        raise ParseError(f"expected qid token, got {body[1]!r}", lineno, body[1])
    try:
        qid = int(body[1][4:])
    except ValueError:
        raise ParseError(f"bad qid token {body[1]!r}", lineno, body[1]) from None
    feats: dict[int, float] = {}
    for tok in body[2:]:
        fid, sep, val = tok.partition(":")
        try:
            if not sep:
                raise ValueError
            fid_i, val_f = int(fid), float(val)
        except ValueError:
            raise ParseError(f"bad feature token {tok!r}", lineno, tok) from None
        if fid_i < 1 or not math.isfinite(val_f):
            raise ParseError(f"bad feature token {tok!r}", lineno, tok)
        feats[fid_i] = val_f
    return label, qid, feats


def load_dataset(path, schema: FeatureSchema | None = None) -> Dataset:
    """Read a LETOR file; one group per qid, in order of first appearance.

    Without a schema, every column is numeric and the width is the largest
    feature id seen.
    """
    rows: "OrderedDict[int, list[tuple[int, dict[int, float]]]]" = OrderedDict()
    line_qids = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.split("#", 1)[0].strip():
                continue
            label, qid, feats = parse_letor_line(line, lineno)
            rows.setdefault(qid, []).append((label, feats))
            line_qids.append(qid)
    if not rows:
        raise DataError(f"{path}: empty dataset")
    max_fid = max((max(f) for items in rows.values() for _, f in items if f), default=0)
    if schema is None:
        schema = FeatureSchema(n_numeric=max_fid)
    elif max_fid > schema.n_file_columns:
        raise SchemaError(f"{path}: feature id {max_fid} exceeds schema width {schema.n_file_columns}")
    width = schema.n_file_columns
    groups = []
    for qid, items in rows.items():
        feats = np.zeros((len(items), width))
        for i, (_, f) in enumerate(items):
            for fid, v in f.items():
                feats[i, fid - 1] = v
        _check_categorical(qid, feats, schema)
        groups.append(QueryGroup(qid, feats, [lab for lab, _ in items]))
    return Dataset(tuple(groups), schema, line_qids=tuple(line_qids))


def _check_categorical(qid, feats, schema: FeatureSchema):
    for c in schema.categorical:
        col = feats[:, c.index]
        if np.any(col != np.round(col)) or np.any(col < 0) or np.any(col >= c.cardinality):
            raise SchemaError(f"qid {qid}: categorical column {c.index} has codes outside [0, {c.cardinality})")


def write_letor(ds: Dataset, path) -> None:
    """Write a dataset back in LETOR format (file columns only)."""
    width = ds.schema.n_file_columns
    with open(path, "w") as fh:
        for g in ds:
            for row, lab in zip(g.features, g.labels):
                feats = " ".join(f"{j + 1}:{float(row[j])!r}" for j in range(width))
                fh.write(f"{lab} qid:{g.qid} {feats}\n")


# ---------------------------------------------------------------------------
# Normalization, splitting, filtering, batching
# ---------------------------------------------------------------------------


def fit_normalizer(train: Dataset) -> Normalizer:
    cols = train.schema.file_numeric_columns
    if not train.groups:
        raise DataError("cannot fit a normalizer on an empty dataset")
    stacked = np.concatenate([g.features[:, cols] for g in train.groups], axis=0)
    return Normalizer(tuple(cols), tuple(stacked.min(axis=0).tolist()), tuple(stacked.max(axis=0).tolist()))


def apply_normalizer(ds: Dataset, norm: Normalizer) -> Dataset:
    if list(norm.columns) != ds.schema.file_numeric_columns:
        raise SchemaError("normalizer columns do not match dataset schema")
    groups = tuple(replace(g, features=norm.transform(g.features)) for g in ds.groups)
    return replace(ds, groups=groups, normalizer=norm)


def split_dataset(ds: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """60/20/20 split by query: valid and test get floor(20%), train the rest."""
    n = len(ds)
    if n < 5:
        raise DomainError(f"need at least 5 queries to split, got {n}")
    n_hold = n // 5
    perm = np.random.default_rng(seed).permutation(n)
    qids = np.asarray(ds.qids)
    valid = sorted(qids[perm[:n_hold]].tolist())
    test = sorted(qids[perm[n_hold : 2 * n_hold]].tolist())
    held = set(valid) | set(test)
    train = [q for q in ds.qids if q not in held]
    keep_order = {q: i for i, q in enumerate(ds.qids)}
    valid.sort(key=keep_order.get)
    test.sort(key=keep_order.get)
    return ds.subset(train), ds.subset(valid), ds.subset(test)


def drop_unlabeled(ds: Dataset) -> Dataset:
    """Remove queries whose labels are all zero (training split only)."""
    return replace(ds, groups=tuple(g for g in ds.groups if np.any(g.labels > 0)), line_qids=None)


def make_batches(ds: Dataset, batch_size: int, seed: int) -> Iterator[list[QueryGroup]]:
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(ds))
    for start in range(0, len(order), batch_size):
        yield [ds.groups[i] for i in order[start : start + batch_size]]


# ---------------------------------------------------------------------------
# Initial rankings
# ---------------------------------------------------------------------------


def read_initial_scores(path, line_qids: Sequence[int] | None = None) -> dict[int, np.ndarray]:
    """Read initial-ranker scores.

    Two layouts are accepted, detected from the first non-empty line:
    ``<qid> <s_1> ... <s_n>`` per query, or one score per line parallel to
    the LETOR file (``line_qids`` then maps lines to queries).
    """
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty scores file")
    out: dict[int, list[float]] = {}
    try:
        if len(lines[0]) == 1:
            if line_qids is None:
                raise DataError(f"{path}: one-score-per-line format needs the dataset's line order")
            if len(lines) != len(line_qids):
                raise DataError(f"{path}: {len(lines)} scores for {len(line_qids)} dataset lines")
            for qid, toks in zip(line_qids, lines):
                if len(toks) != 1:
                    raise DataError(f"{path}: mixed score-file layouts")
                out.setdefault(qid, []).append(float(toks[0]))
        else:
            for toks in lines:
                qid = int(toks[0])
                if qid in out:
                    raise DataError(f"{path}: qid {qid} listed twice")
                out[qid] = [float(t) for t in toks[1:]]
    except ValueError as exc:
        raise DataError(f"{path}: unreadable score: {exc}") from None
    return {q: np.asarray(v, dtype=np.float64) for q, v in out.items()}


def write_initial_scores(scores: Mapping[int, np.ndarray], path) -> None:
    with open(path, "w") as fh:
        for qid, vals in scores.items():
            fh.write(f"{qid} " + " ".join(repr(float(v)) for v in vals) + "\n")


def initial_ranking(scores: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
    """Row order by descending score; ties go to the smaller item id."""
    return np.lexsort((item_ids, -np.asarray(scores)))


def attach_initial_order(ds: Dataset, scores: Mapping[int, np.ndarray], top_k: int = 100) -> Dataset:
    """Sort each list by initial score, keep the top ``top_k``, append rank/n_q.

    Scores are indexed by ``item_ids`` (file position within the query).
    """
    if ds.schema.has_initial_order:
        raise DataError("dataset already carries an initial-order feature")
    if top_k < 1:
        raise DomainError("top_k must be >= 1")
    groups = []
    for g in ds.groups:
        if g.qid not in scores:
            raise DataError(f"no initial scores for qid {g.qid}")
        s = np.asarray(scores[g.qid], dtype=np.float64)
        complete = np.array_equal(np.sort(g.item_ids), np.arange(g.n_items))
        if s.ndim != 1 or s.size <= int(g.item_ids.max()) or (complete and s.size != g.n_items):
            raise DataError(f"qid {g.qid}: {s.size} initial scores for {g.n_items} items")
        order = initial_ranking(s[g.item_ids], g.item_ids)[:top_k]
        n = len(order)
        rank_feat = (np.arange(1, n + 1) / n)[:, None]
        groups.append(
            QueryGroup(
                g.qid,
                np.hstack([g.features[order], rank_feat]),
                g.labels[order],
                item_ids=g.item_ids[order],
                initial_order=np.arange(n),
            )
        )
    schema = replace(ds.schema, has_initial_order=True)
    return Dataset(tuple(groups), schema, ds.normalizer)
