"""A pointwise linear initial ranker for building top-k candidate lists."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset


@dataclass(frozen=True)
class LinearRanker:
    weights: np.ndarray
    bias: float

    @classmethod
    def fit(cls, ds: Dataset, ridge: float = 1e-3) -> "LinearRanker":
        """Ridge regression of labels on the numeric file columns."""
        cols = ds.schema.file_numeric_columns
        x = np.concatenate([g.features[:, cols] for g in ds])
        y = np.concatenate([g.labels for g in ds]).astype(np.float64)
        xm, ym = x.mean(axis=0), y.mean()
        xc = x - xm
        w = np.linalg.solve(xc.T @ xc + ridge * len(y) * np.eye(len(cols)), xc.T @ (y - ym))
        return cls(w, float(ym - xm @ w))

    def score(self, ds: Dataset) -> dict[int, np.ndarray]:
        """Scores per qid, indexed by item id."""
        cols = ds.schema.file_numeric_columns
        out = {}
        for g in ds:
            s = np.empty(int(g.item_ids.max()) + 1)
            s[g.item_ids] = g.features[:, cols] @ self.weights + self.bias
            out[g.qid] = s
        return out
