"""Adam optimization, validation-driven model selection and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .data import Dataset, FeatureSchema, Normalizer, QueryGroup, drop_unlabeled, make_batches
from .errors import CheckpointError, NonFiniteError, SchemaError
from .loss import LossBreakdown, total_loss
from .metrics import evaluate, parse_metric
from .model import ModelConfig, check_params, forward_batch, init_params, score_groups

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 80
    max_epochs: int = 100
    seed: int = 0
    early_stop_patience: int = 10
    selection_metric: str = "ndcg@10"
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be > 0 when set")
        parse_metric(self.selection_metric)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}")
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - cfg.beta2) * (g * g)
        new_params[name] = p - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        m_new[name], v_new[name] = m, v
    return new_params, OptimizerState(m_new, v_new, t)


def batch_gradients(
    params: Mapping[str, np.ndarray],
    groups: Sequence[QueryGroup],
    config: ModelConfig,
    schema: FeatureSchema,
    rng: np.random.Generator | None = None,
) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    g = dc.Graph()
    leaves = {k: g.param(v, name=k) for k, v in params.items()}
    fb = forward_batch(g, groups, leaves, config, schema)
    loss, parts = total_loss(fb, groups, config, rng)
    grads = dc.backward(g, loss)
    return {k: grads[t.id] for k, t in leaves.items()}, parts


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# ---------------------------------------------------------------------------
# Model bundles and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """Everything needed to score data: configs, schema, normalizer, weights."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    schema: FeatureSchema
    normalizer: Normalizer | None = None
    train_config: TrainConfig | None = None
    run: dict = field(default_factory=dict)

    def __post_init__(self):
        check_params(self.params, self.schema, self.config)

    @property
    def seed(self) -> int | None:
        return self.run.get("seed")

    def check_dataset(self, ds: Dataset) -> None:
        if ds.schema != self.schema:
            raise SchemaError(f"dataset schema {ds.schema.to_dict()} does not match model schema {self.schema.to_dict()}")
        if self.normalizer is not None and ds.normalizer != self.normalizer:
            raise SchemaError("dataset is not normalized with the model's normalizer")

    def score(self, groups: Sequence[QueryGroup]) -> list[np.ndarray]:
        return score_groups(list(groups), self.params, self.config, self.schema)


def checkpoint_document(bundle: ModelBundle) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": {
            "model": bundle.config.to_dict(),
            "train": bundle.train_config.to_dict() if bundle.train_config else None,
        },
        "schema": bundle.schema.to_dict(),
        "normalizer": bundle.normalizer.to_dict() if bundle.normalizer else None,
        "run": bundle.run,
        "params": {
            k: {"shape": list(v.shape), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in bundle.params.items()
        },
    }


def save_checkpoint(path, bundle: ModelBundle) -> None:
    """Write a JSON checkpoint; floats use shortest round-trip repr."""
    Path(path).write_text(json.dumps(checkpoint_document(bundle), sort_keys=True) + "\n")


def bundle_from_document(doc: Mapping) -> ModelBundle:
    if not isinstance(doc, Mapping) or "format_version" not in doc:
        raise CheckpointError("not a checkpoint document")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {doc['format_version']} is incompatible with version {FORMAT_VERSION}")
    try:
        params = {}
        for k, spec in doc["params"].items():
            arr = np.asarray(spec["values"], dtype=np.float64)
            params[k] = arr.reshape(spec["shape"])
        cfg = doc["config"]
        return ModelBundle(
            config=ModelConfig.from_dict(cfg["model"]),
            params=params,
            schema=FeatureSchema.from_dict(doc["schema"]),
            normalizer=Normalizer.from_dict(doc["normalizer"]) if doc.get("normalizer") else None,
            train_config=TrainConfig.from_dict(cfg["train"]) if cfg.get("train") else None,
            run=dict(doc.get("run") or {}),
        )
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def load_checkpoint(path) -> ModelBundle:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: cannot parse checkpoint: {exc}") from None
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return bundle_from_document(doc)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    rank_loss: float
    conf_loss: float
    total: float
    valid_metric: float


@dataclass
class FitResult:
    bundle: ModelBundle
    history: list[EpochRecord]
    best_epoch: int


HISTORY_FIELDS = ("epoch", "rank_loss", "conf_loss", "total", "valid_metric")


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow([r.epoch, repr(r.rank_loss), repr(r.conf_loss), repr(r.total), repr(r.valid_metric)])
    return buf.getvalue()


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def fit(
    train_ds: Dataset,
    valid_ds: Dataset | None,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: Mapping[str, np.ndarray] | None = None,
    run: Mapping | None = None,
) -> FitResult:
    """Train with Adam; keep the parameters of the best validation epoch.

    Queries without any relevant item are dropped from ``train_ds``. Without
    a validation set the final epoch is kept.
    """
    train_ds = drop_unlabeled(train_ds)
    if not len(train_ds):
        raise ValueError("training split has no query with a relevant item")
    schema = train_ds.schema
    params = dict(params) if params is not None else init_params(schema, model_cfg, train_cfg.seed)
    run_info = {"seed": train_cfg.seed, **(run or {})}

    def bundle_for(p):
        return ModelBundle(model_cfg, {k: v.copy() for k, v in p.items()}, schema, train_ds.normalizer, train_cfg, dict(run_info))

    state = OptimizerState()
    history: list[EpochRecord] = []
    best, best_value, best_epoch, stale = None, -math.inf, 0, 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        eseed = _epoch_seed(train_cfg.seed, epoch)
        pair_rng = np.random.default_rng(eseed + 1)
        parts_sum = np.zeros(3)
        n_batches = 0
        for b, batch in enumerate(make_batches(train_ds, train_cfg.batch_size, eseed)):
            try:
                grads, parts = batch_gradients(params, batch, model_cfg, schema, pair_rng)
                if train_cfg.max_grad_norm is not None:
                    grads = clip_by_global_norm(grads, train_cfg.max_grad_norm)
                params, state = adam_step(params, grads, state, train_cfg)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from exc
            parts_sum += (parts.rank_loss, parts.conf_loss, parts.total)
            n_batches += 1
        rank_l, conf_l, tot_l = parts_sum / n_batches
        if valid_ds is not None and len(valid_ds):
            value = evaluate(bundle_for(params), valid_ds, [train_cfg.selection_metric]).aggregate[train_cfg.selection_metric]
        else:
            value = math.nan
        history.append(EpochRecord(epoch, float(rank_l), float(conf_l), float(tot_l), float(value)))
        logger.info("epoch %d: loss %.6f (rank %.6f, conf %.6f) valid %s=%.4f", epoch, tot_l, rank_l, conf_l, train_cfg.selection_metric, value)
        if math.isnan(value):
            best, best_epoch = params, epoch
            continue
        if value > best_value:
            best, best_value, best_epoch, stale = params, value, epoch, 0
        else:
            stale += 1
            if stale >= train_cfg.early_stop_patience:
                logger.info("early stop after epoch %d; best epoch %d", epoch, best_epoch)
                break
    result_bundle = bundle_for(best)
    result_bundle.run["best_epoch"] = best_epoch
    return FitResult(result_bundle, history, best_epoch)
