"""Listwise reranking with query-invariant item representations.

Modules: ``diffcore`` (reverse-mode autodiff), ``data`` (LETOR ingestion),
``model`` (encoder, pooling, query normalization, scoring), ``loss``,
``train``, ``metrics``, ``analysis`` (isolation-forest gap reports) and
``cli``.
"""

from .data import Dataset, FeatureSchema, QueryGroup, load_dataset
from .metrics import ndcg_at_k, precision_at_k, t_test
from .model import ModelConfig, forward, init_params, variant_config
from .train import ModelBundle, TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FeatureSchema",
    "QueryGroup",
    "load_dataset",
    "ndcg_at_k",
    "precision_at_k",
    "t_test",
    "ModelConfig",
    "forward",
    "init_params",
    "variant_config",
    "ModelBundle",
    "TrainConfig",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
]
