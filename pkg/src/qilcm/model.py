"""The listwise ranker: item encoder, attention pooling, query normalization
and a softmax ranking layer, with switches for the ablation variants.

Everything runs on stacked batches: the rows of all queries in a batch are
concatenated and per-query reductions go through :class:`Segments`, so one
graph covers the whole batch. Single-query helpers wrap the batch path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .data import FeatureSchema, QueryGroup
from .diffcore import Graph, Segments, Tensor
from .errors import ContractViolation, DimensionError

POOLING_MODES = ("attention", "mean")


@dataclass(frozen=True)
class ModelConfig:
    d1: int = 100
    d2: int = 100
    att_hidden: tuple[int, ...] = (256, 128)
    rank_hidden: tuple[int, ...] = (256, 128)
    eps: float = 1e-5
    pooling: str = "attention"
    qn_enabled: bool = True
    lambda_conf: float = 0.1
    conf_pairs: int | None = None  # None: every ordered pair; else sample this many unordered pairs

    def __post_init__(self):
        object.__setattr__(self, "att_hidden", tuple(int(d) for d in self.att_hidden))
        object.__setattr__(self, "rank_hidden", tuple(int(d) for d in self.rank_hidden))
        if self.d1 < 1 or self.d2 < 1 or any(d < 1 for d in self.att_hidden + self.rank_hidden):
            raise ValueError("all layer widths must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.lambda_conf < 0:
            raise ValueError("lambda_conf must be >= 0")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if self.conf_pairs is not None and self.conf_pairs < 1:
            raise ValueError("conf_pairs must be >= 1 when given")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["att_hidden"] = list(self.att_hidden)
        d["rank_hidden"] = list(self.rank_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


VARIANTS = {
    "qilcm": {},
    "variant1": {"pooling": "mean"},
    "variant2": {"lambda_conf": 0.0},
    "variant3": {"lambda_conf": 0.0, "qn_enabled": False},
}


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Apply an ablation variant's switches to ``base``."""
    from dataclasses import replace

    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return replace(base or ModelConfig(), **VARIANTS[name])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _mlp_shapes(prefix: str, d_in: int, hidden: Sequence[int]) -> list[tuple[str, int, int]]:
    dims = [d_in, *hidden, 1]
    return [(f"{prefix}.{k}", dims[k], dims[k + 1]) for k in range(len(dims) - 1)]


def encoded_dim(schema: FeatureSchema, config: ModelConfig) -> int:
    """Width of h: the preprocessed input concatenated with the encoder output."""
    return schema.input_dim + config.d2


def param_shapes(schema: FeatureSchema, config: ModelConfig) -> dict[str, tuple[int, ...]]:
    f_in = schema.input_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for c in schema.categorical:
        shapes[f"emb.{c.index}"] = (c.cardinality, c.dim)
    shapes.update({"enc.W1": (f_in, config.d1), "enc.b1": (config.d1,), "enc.W2": (config.d1, config.d2), "enc.b2": (config.d2,)})
    h_dim = encoded_dim(schema, config)
    layers = _mlp_shapes("rank", 2 * h_dim, config.rank_hidden)
    if config.pooling == "attention":
        layers = _mlp_shapes("att", h_dim, config.att_hidden) + layers
    for name, i, o in layers:
        shapes[f"{name}.W"] = (i, o)
        shapes[f"{name}.b"] = (o,)
    return shapes


def init_params(schema: FeatureSchema, config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, embeddings uniform in [-0.05, 0.05]."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(schema, config).items():
        if name.startswith("emb."):
            params[name] = rng.uniform(-0.05, 0.05, size=shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = _glorot(rng, *shape)
    return params


def check_params(params: Mapping[str, np.ndarray], schema: FeatureSchema, config: ModelConfig) -> None:
    expected = param_shapes(schema, config)
    if set(params) != set(expected):
        missing, extra = set(expected) - set(params), set(params) - set(expected)
        raise DimensionError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, shp in expected.items():
        if tuple(np.shape(params[k])) != shp:
            raise DimensionError(f"{k}: shape {np.shape(params[k])}, expected {shp}")


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass
class QueryTrace:
    """Intermediate values of one query's forward pass (plain arrays)."""

    qid: int
    x: np.ndarray
    h: np.ndarray
    a: np.ndarray
    c: np.ndarray
    h_tilde: np.ndarray
    c_bar: np.ndarray
    var_bar: np.ndarray
    h_bar: np.ndarray
    s: np.ndarray


@dataclass
class BatchForward:
    """Graph tensors for a stacked batch; ``query(k)`` slices one query out."""

    qids: list[int]
    seg: Segments
    x: Tensor
    h: Tensor
    a: Tensor
    c: Tensor
    h_tilde: Tensor
    c_bar: Tensor | None
    var_bar: Tensor | None
    h_bar: Tensor
    s: Tensor
    logits: Tensor = field(repr=False)

    def query(self, k: int) -> QueryTrace:
        sl = self.seg.slice(k)
        c_bar = self.c_bar.value[k : k + 1] if self.c_bar is not None else None
        var_bar = self.var_bar.value[k : k + 1] if self.var_bar is not None else None
        return QueryTrace(
            self.qids[k],
            self.x.value[sl],
            self.h.value[sl],
            self.a.value[sl],
            self.c.value[k : k + 1],
            self.h_tilde.value[sl],
            c_bar,
            var_bar,
            self.h_bar.value[sl],
            self.s.value[sl],
        )

    def traces(self) -> list[QueryTrace]:
        return [self.query(k) for k in range(self.seg.count)]


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------


def _mlp(x: Tensor, p: Mapping[str, Tensor], prefix: str, n_layers: int) -> Tensor:
    for k in range(n_layers):
        x = dc.affine(x, p[f"{prefix}.{k}.W"], p[f"{prefix}.{k}.b"])
        if k < n_layers - 1:
            x = dc.elu(x)
    return dc.reshape(x, (x.shape[0],))


def build_input(g: Graph, groups: Sequence[QueryGroup], p: Mapping[str, Tensor], schema: FeatureSchema) -> Tensor:
    """Stack the groups' rows into x: numeric columns then embedded categoricals."""
    raw = np.concatenate([grp.features for grp in groups], axis=0)
    if raw.shape[1] != schema.n_columns:
        raise DimensionError(f"feature matrix has {raw.shape[1]} columns, schema expects {schema.n_columns}")
    numeric = raw[:, schema.numeric_columns]
    if numeric.size and (numeric.min() < 0.0 or numeric.max() > 1.0):
        raise ContractViolation("numeric features must be normalized to [0, 1] before encoding")
    parts = [g.constant(numeric)]
    for c in schema.categorical:
        parts.append(dc.gather_rows(p[f"emb.{c.index}"], raw[:, c.index].astype(np.int64)))
    return dc.concat(parts, axis=1) if len(parts) > 1 else parts[0]


def encode_items(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    x1 = dc.elu(dc.affine(x, p["enc.W1"], p["enc.b1"]))
    x2 = dc.elu(dc.affine(x1, p["enc.W2"], p["enc.b2"]))
    return dc.concat([x, x2], axis=1)


def attention_pool(h: Tensor, p: Mapping[str, Tensor], seg: Segments, n_layers: int) -> tuple[Tensor, Tensor]:
    a = dc.segment_softmax(_mlp(h, p, "att", n_layers), seg)
    return a, dc.segment_sum(dc.scale_rows(h, a), seg)


def mean_pool(h: Tensor, seg: Segments) -> tuple[Tensor, Tensor]:
    a = h.graph.constant(1.0 / np.asarray(seg.lengths, dtype=np.float64)[seg.ids])
    return a, dc.segment_sum(dc.scale_rows(h, a), seg)


def refine(h: Tensor, c: Tensor, seg: Segments) -> Tensor:
    """[c ⊙ h_i ; h_i] with the query's context vector shared by its items."""
    if c.shape[1] != h.shape[1]:
        raise ContractViolation(f"context width {c.shape[1]} != item width {h.shape[1]}")
    return dc.concat([dc.hadamard(dc.gather_rows(c, seg.ids), h), h], axis=1)


def query_normalize(h_tilde: Tensor, a: Tensor, seg: Segments, eps: float) -> tuple[Tensor, Tensor, Tensor]:
    """Standardize each query's rows by its attention-weighted mean and std."""
    c_bar = dc.segment_sum(dc.scale_rows(h_tilde, a), seg)
    centered = dc.sub(h_tilde, dc.gather_rows(c_bar, seg.ids))
    var_bar = dc.segment_sum(dc.scale_rows(dc.square(centered), a), seg)
    denom = dc.add_scalar(dc.sqrt(var_bar), eps)
    return dc.divide(centered, dc.gather_rows(denom, seg.ids)), c_bar, var_bar


def rank_scores(h_bar: Tensor, p: Mapping[str, Tensor], seg: Segments, n_layers: int) -> tuple[Tensor, Tensor]:
    logits = _mlp(h_bar, p, "rank", n_layers)
    return dc.segment_softmax(logits, seg), logits


def forward_batch(
    g: Graph,
    groups: Sequence[QueryGroup],
    p: Mapping[str, Tensor],
    config: ModelConfig,
    schema: FeatureSchema,
) -> BatchForward:
    seg = Segments(tuple(grp.n_items for grp in groups))
    x = build_input(g, groups, p, schema)
    h = encode_items(x, p)
    if config.pooling == "attention":
        a, c = attention_pool(h, p, seg, len(config.att_hidden) + 1)
    else:
        a, c = mean_pool(h, seg)
    h_tilde = refine(h, c, seg)
    if config.qn_enabled:
        h_bar, c_bar, var_bar = query_normalize(h_tilde, a, seg, config.eps)
    else:
        h_bar, c_bar, var_bar = h_tilde, None, None
    s, logits = rank_scores(h_bar, p, seg, len(config.rank_hidden) + 1)
    return BatchForward([grp.qid for grp in groups], seg, x, h, a, c, h_tilde, c_bar, var_bar, h_bar, s, logits)


def constant_params(g: Graph, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: g.constant(v, name=k) for k, v in params.items()}


def forward(
    group: QueryGroup,
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    schema: FeatureSchema | None = None,
) -> QueryTrace:
    """Run one query through the model without recording gradients."""
    schema = schema or FeatureSchema(n_numeric=group.features.shape[1])
    g = Graph()
    return forward_batch(g, [group], constant_params(g, params), config, schema).query(0)


def score_groups(
    groups: Sequence[QueryGroup],
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    schema: FeatureSchema,
    chunk: int = 256,
) -> list[np.ndarray]:
    """Ranking scores s for each group, evaluated in stacked chunks."""
    out = []
    for start in range(0, len(groups), chunk):
        part = groups[start : start + chunk]
        g = Graph()
        fb = forward_batch(g, part, constant_params(g, params), config, schema)
        out.extend(fb.s.value[fb.seg.slice(k)].copy() for k in range(len(part)))
    return out
