"""Oracle importance and rankings.

Positions are 0-based throughout the library. A ranking is an integer array of
shape ``(L, H, T)`` whose last axis lists positions from most to least
important; ties go to the lower position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InvalidScoreError, SizeMismatchError
from .trace_model import ModelShape, TraceBundle


@dataclass(frozen=True, eq=False)
class ImportanceTensor:
    shape: ModelShape
    values: np.ndarray  # float64 [L, H, T]
    normalization: Literal["raw", "intra_layer"] = "raw"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.shape.L, self.shape.H, self.shape.T):
            raise SizeMismatchError(f"importance has dims {v.shape}, expected "
                                    f"{(self.shape.L, self.shape.H, self.shape.T)}")
        object.__setattr__(self, "values", v)

    def head(self, l: int, h: int) -> np.ndarray:
        return self.values[l, h]

    def head_mass(self) -> np.ndarray:
        return self.values.sum(axis=-1)


@dataclass(frozen=True, eq=False)
class Ranking:
    order: np.ndarray  # int64 [L, H, T]

    def head(self, l: int, h: int) -> np.ndarray:
        return self.order[l, h]

    def prefix(self, l: int, h: int, k: int) -> np.ndarray:
        return self.order[l, h, :k]

    def prefix_mask(self, budgets) -> np.ndarray:
        """Boolean [L, H, T] mask of each head's top-``budgets[l, h]`` positions."""
        budgets = np.asarray(budgets)
        ranks = np.empty_like(self.order)
        np.put_along_axis(ranks, self.order, np.arange(self.order.shape[-1]), axis=-1)
        return ranks < budgets[..., None]

    def __eq__(self, other):
        return isinstance(other, Ranking) and np.array_equal(self.order, other.order)


def descending_ranking(scores: np.ndarray) -> Ranking:
    """Stable descending argsort along the last axis."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        idx = tuple(int(i) for i in np.argwhere(np.isnan(scores))[0])
        raise InvalidScoreError(f"NaN score at {list(idx)}")
    return Ranking(np.argsort(-scores, axis=-1, kind="stable"))


def compute_oracle_importance(trace: TraceBundle, normalize: bool = True) -> ImportanceTensor:
    """Max over decode steps of attention times projected value norm.

    With ``normalize`` every layer is divided by its total so that layers are
    commensurable; all-zero layers stay zero.
    """
    attn = trace.decode_attn.astype(np.float64)
    vnorm = trace.vnorm.astype(np.float64)
    if attn.shape[:2] + attn.shape[3:] != vnorm.shape:
        raise SizeMismatchError("decode_attn and vnorm disagree on (L, H, T)")
    values = attn.max(axis=2) * vnorm
    if not normalize:
        return ImportanceTensor(trace.shape, values, "raw")
    return ImportanceTensor(trace.shape, normalize_intra_layer(values), "intra_layer")


def normalize_intra_layer(values: np.ndarray) -> np.ndarray:
    totals = values.sum(axis=(1, 2), keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    return np.where(totals > 0, values / safe, 0.0)


def oracle_ranking(importance: ImportanceTensor) -> Ranking:
    return descending_ranking(importance.values)
