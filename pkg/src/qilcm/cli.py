"""Command-line entry points: ``qilcm train | evaluate | rerank | analyze``.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import fit_isolation_forest, gap_report, query_vectors
from .data import (
    Dataset,
    FeatureSchema,
    apply_normalizer,
    attach_initial_order,
    fit_normalizer,
    initial_ranking,
    load_dataset,
    read_initial_scores,
    split_dataset,
    write_initial_scores,
)
from .errors import QILCMError
from .metrics import DEFAULT_METRICS, METRIC_PATTERN, REPORT_METRICS, evaluate, format_table
from .model import VARIANTS, ModelConfig
from .train import ModelBundle, TrainConfig, fit, history_csv, load_checkpoint, save_checkpoint

log = logging.getLogger("qilcm")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    data: str | None = None
    schema: str | None = None
    initial_scores: str | None = None
    top_k: int = 100
    variant: str = "qilcm"
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    RUN_KEYS = ("data", "schema", "initial_scores", "top_k", "variant", "threads")

    @classmethod
    def from_mapping(cls, raw: dict[str, Any]) -> "RunConfig":
        """Validate a flat key/value mapping; unknown keys are rejected."""
        unknown = set(raw) - set(cls.RUN_KEYS) - MODEL_KEYS - TRAIN_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        variant = raw.get("variant", "qilcm")
        if variant not in VARIANTS:
            raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(sorted(VARIANTS))}")
        model_kw = {k: v for k, v in raw.items() if k in MODEL_KEYS}
        for k, v in VARIANTS[variant].items():
            if k in model_kw and model_kw[k] != v:
                raise UsageError(f"config sets {k}={model_kw[k]!r} but variant {variant} requires {v!r}")
            model_kw[k] = v
        try:
            model = ModelConfig(**model_kw)
            train = TrainConfig(**{k: v for k, v in raw.items() if k in TRAIN_KEYS})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from None
        run = {k: raw[k] for k in cls.RUN_KEYS if k in raw}
        cfg = cls(model=model, train=train, **run)
        if cfg.top_k < 1:
            raise UsageError("top_k must be >= 1")
        if cfg.threads < 1:
            raise UsageError("threads must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.RUN_KEYS}
        out.update(self.model.to_dict())
        out.update(self.train.to_dict())
        return out


def _parse_set(items: list[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def resolve_run_config(args) -> RunConfig:
    raw: dict[str, Any] = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    raw.update(_parse_set(args.set or []))
    for flag, key in (("data", "data"), ("schema", "schema"), ("initial_scores", "initial_scores"), ("top", "top_k"), ("seed", "seed"), ("threads", "threads")):
        val = getattr(args, flag, None)
        if val is not None:
            raw[key] = val
    if "threads" not in raw and os.environ.get("QILCM_THREADS"):
        raw["threads"] = _env_threads()
    return RunConfig.from_mapping(raw)


def _env_threads() -> int:
    text = os.environ["QILCM_THREADS"]
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"QILCM_THREADS must be an integer, got {text!r}") from None


def resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    return _env_threads() if os.environ.get("QILCM_THREADS") else 1


@contextmanager
def thread_limit(n: int):
    """Cap BLAS worker threads for the duration of a command."""
    with threadpool_limits(limits=n):
        yield


def parse_metrics(text: str) -> list[str]:
    tokens = [t.strip().lower() for t in text.split(",") if t.strip()]
    bad = [t for t in tokens if not METRIC_PATTERN.match(t)]
    if bad or not tokens:
        raise UsageError(f"unknown metric token(s) {', '.join(bad) or '(none)'}; valid tokens: ndcg@K, p@K (e.g. {','.join(REPORT_METRICS)})")
    return tokens


# ---------------------------------------------------------------------------
# Shared data preparation
# ---------------------------------------------------------------------------


def _file_schema(schema: FeatureSchema) -> FeatureSchema:
    return replace(schema, has_initial_order=False)


def _prepare(ds: Dataset, bundle: ModelBundle, scores, top_k: int) -> Dataset:
    """Normalize with the bundle's statistics and attach the initial order if the model uses it."""
    if bundle.normalizer is not None:
        ds = apply_normalizer(ds, bundle.normalizer)
    if bundle.schema.has_initial_order:
        if scores is None:
            raise QILCMError("this model uses an initial-order feature; pass --initial-scores")
        ds = attach_initial_order(ds, scores, top_k)
    return ds


def _select_split(ds: Dataset, bundle: ModelBundle, split: str = "all") -> Dataset:
    """The requested split, recomputed with the seed stored at training time."""
    if split != "all":
        seed = bundle.run.get("split_seed")
        if seed is None:
            raise QILCMError("checkpoint does not record a split seed; use --split all")
        train, valid, test = split_dataset(ds, seed)
        ds = {"train": train, "valid": valid, "test": test}[split]
    return ds


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    if not cfg.data:
        raise UsageError("the following argument is required: --data")
    for p in (cfg.data, cfg.schema, cfg.initial_scores):
        if p and not Path(p).exists():
            raise UsageError(f"no such file: {p}")
    with thread_limit(cfg.threads):
        schema = FeatureSchema.load(cfg.schema) if cfg.schema else None
        full = load_dataset(cfg.data, schema)
        seed = cfg.train.seed
        splits = split_dataset(full, seed)
        norm = fit_normalizer(splits[0])
        splits = [apply_normalizer(s, norm) for s in splits]
        if cfg.initial_scores:
            scores = read_initial_scores(cfg.initial_scores, full.line_qids)
            splits = [attach_initial_order(s, scores, cfg.top_k) for s in splits]
        train, valid, test = splits
        run = {"split_seed": seed, "top_k": cfg.top_k, "variant": cfg.variant}
        result = fit(train, valid, cfg.model, cfg.train, run=run)
        out = _out_dir(args.out)
        save_checkpoint(out / "checkpoint.json", result.bundle)
        (out / "history.csv").write_text(history_csv(result.history))
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        metrics = list(DEFAULT_METRICS) + ([cfg.train.selection_metric] if cfg.train.selection_metric not in DEFAULT_METRICS else [])
        if len(test):
            report = evaluate(result.bundle, test, metrics, threads=cfg.threads, run_id="test")
            (out / "test_report.json").write_text(report.to_json() + "\n")
            print(format_table({cfg.variant: report}, metrics))
    print(f"best epoch {result.best_epoch}; wrote {out / 'checkpoint.json'}")
    return 0


def cmd_evaluate(args) -> int:
    metrics = parse_metrics(args.metrics)
    threads = resolve_threads(args)
    with thread_limit(threads):
        bundle = load_checkpoint(args.model)
        full = load_dataset(args.data, _file_schema(bundle.schema))
        scores = read_initial_scores(args.initial_scores, full.line_qids) if args.initial_scores else None
        ds = _select_split(full, bundle, args.split)
        ds = _prepare(ds, bundle, scores, args.top or bundle.run.get("top_k", 100))
        report = evaluate(bundle, ds, metrics, threads=threads, run_id=Path(args.model).stem)
    print(format_table({args.name or Path(args.model).parent.name or "model": report}, metrics))
    out = _out_dir(args.out)
    (out / "report.json").write_text(report.to_json() + "\n")
    return 0


def cmd_rerank(args) -> int:
    threads = resolve_threads(args)
    with thread_limit(threads):
        bundle = load_checkpoint(args.model)
        ds = load_dataset(args.data, _file_schema(bundle.schema))
        scores = read_initial_scores(args.initial_scores, ds.line_qids)
        if bundle.normalizer is not None:
            ds = apply_normalizer(ds, bundle.normalizer)
        ranked = attach_initial_order(ds, scores, args.top)
        if not bundle.schema.has_initial_order:
            # model does not read the rank column: keep only sorting + truncation
            ranked = Dataset(
                tuple(replace(g, features=g.features[:, :-1]) for g in ranked.groups),
                _file_schema(ranked.schema),
                ranked.normalizer,
            )
        model_scores = bundle.score(list(ranked.groups))
    out = _out_dir(args.out)
    lines, new_scores = [], {}
    for g, s in zip(ranked.groups, model_scores):
        order = initial_ranking(s, g.item_ids)
        lines.append(f"{g.qid} " + " ".join(str(int(i)) for i in g.item_ids[order]))
        n_total = len(scores[g.qid])
        full = np.empty(n_total)
        # items cut by --top keep their initial order below every model score
        init_rank = np.empty(n_total, dtype=np.int64)
        init_rank[initial_ranking(scores[g.qid], np.arange(n_total))] = np.arange(n_total)
        full[:] = -1.0 - init_rank / n_total
        full[g.item_ids] = s
        new_scores[g.qid] = full
    (out / "rerank.txt").write_text("\n".join(lines) + "\n")
    write_initial_scores(new_scores, out / "scores.txt")
    print(f"reranked {len(lines)} queries; wrote {out / 'rerank.txt'}")
    return 0


def cmd_analyze(args) -> int:
    threads = resolve_threads(args)
    with thread_limit(threads):
        a, b = load_checkpoint(args.model_a), load_checkpoint(args.model_b)
        if a.schema != b.schema or a.normalizer != b.normalizer:
            raise QILCMError("model-a and model-b have incompatible schemas or normalizers")
        seed = a.run.get("split_seed")
        if seed is None:
            raise QILCMError("model-a checkpoint does not record a split seed")
        full = load_dataset(args.data, _file_schema(a.schema))
        scores = read_initial_scores(args.initial_scores, full.line_qids) if args.initial_scores else None
        train, _, test = split_dataset(full, seed)
        top_k = a.run.get("top_k", 100)
        train, test = (_prepare(d, a, scores, top_k) for d in (train, test))
        forest = fit_isolation_forest(query_vectors(train, None if a.schema.has_initial_order else scores, args.k), n_trees=args.trees, subsample=args.subsample, seed=args.seed, threads=threads)
        report = gap_report(a, b, test, forest, args.metric, args.buckets, args.k, None if a.schema.has_initial_order else scores)
    out = _out_dir(args.out)
    (out / "gap_report.json").write_text(report.to_json() + "\n")
    (out / "gap_report.csv").write_text(report.to_csv())
    (out / "gap_report.dat").write_text(report.to_gnuplot())
    print(report.to_csv(), end="")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qilcm", description="Query-invariant listwise context ranking.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=int, help="worker cap (default: $QILCM_THREADS or 1)")

    t = sub.add_parser("train", help="split, normalize, train and checkpoint")
    t.add_argument("--data", help="LETOR training file")
    t.add_argument("--schema", help="JSON feature schema")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--initial-scores", dest="initial_scores", help="initial ranker scores")
    t.add_argument("--top", type=int, help="rerank depth (default 100)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    threads(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a dataset and report metrics")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", default=",".join(REPORT_METRICS))
    e.add_argument("--split", choices=("all", "train", "valid", "test"), default="all")
    e.add_argument("--initial-scores", dest="initial_scores")
    e.add_argument("--top", type=int)
    e.add_argument("--name", help="column label in the printed table")
    e.add_argument("--out", default=".", help="directory for report.json")
    threads(e)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rerank", help="rerank the top of an initial ranking")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--initial-scores", dest="initial_scores", required=True)
    r.add_argument("--top", type=int, default=100)
    r.add_argument("--out", required=True)
    threads(r)
    r.set_defaults(func=cmd_rerank)

    a = sub.add_parser("analyze", help="performance gap by query anomaly")
    a.add_argument("--model-a", dest="model_a", required=True)
    a.add_argument("--model-b", dest="model_b", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--initial-scores", dest="initial_scores")
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--buckets", type=int, default=5)
    a.add_argument("--metric", default="ndcg@1")
    a.add_argument("--trees", type=int, default=100)
    a.add_argument("--subsample", type=int, default=256)
    a.add_argument("--seed", type=int, default=0, help="isolation forest seed")
    a.add_argument("--out", required=True)
    threads(a)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    sub_parser = parser._subparsers._group_actions[0].choices[args.command]
    try:
        if getattr(args, "metric", None):
            parse_metrics(args.metric)
        return args.func(args)
    except UsageError as exc:
        sub_parser.print_usage(sys.stderr)
        print(f"qilcm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (QILCMError, OSError) as exc:
        print(f"qilcm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
