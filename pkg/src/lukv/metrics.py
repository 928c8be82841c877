"""Prefill-observable scoring metrics.

``snapkv``
    mean attention of the last ``window_size`` observation rows, then a
    stride-1 max-pool of width ``kernel_size`` whose edge windows are truncated.
``keydiff``
    negative cosine between each key and the head's mean key; anomalous keys
    score high.
``oracle``
    passes oracle importance through, for upper-bound comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MetricUnavailableError
from .oracle import Ranking, compute_oracle_importance, descending_ranking
from .trace_model import TraceBundle

METRIC_KINDS = ("snapkv", "keydiff", "oracle")
DEFAULT_WINDOW = {"snapkv": 32, "keydiff": 1, "oracle": 32}
DEFAULT_KERNEL = 7


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "snapkv"
    window_size: int | None = None
    kernel_size: int = DEFAULT_KERNEL

    def __post_init__(self):
        kind = {"oracle_passthrough": "oracle"}.get(self.kind, self.kind)
        if kind not in METRIC_KINDS:
            raise ConfigError(f"unknown metric {self.kind!r}; choose from {METRIC_KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.window_size is None:
            object.__setattr__(self, "window_size", DEFAULT_WINDOW[kind])
        if self.window_size < 1:
            raise ConfigError("window_size must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")

    def check(self, T: int) -> None:
        if self.window_size > T:
            raise ConfigError(f"window_size {self.window_size} exceeds T={T}")


def max_pool_same(x: np.ndarray, kernel: int) -> np.ndarray:
    """Stride-1 max-pool along the last axis with truncated edge windows."""
    if kernel == 1:
        return x.copy()
    r = kernel // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(r, r)]
    padded = np.pad(x, pad, constant_values=-np.inf)
    return np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=-1).max(axis=-1)


def snapkv_score(trace: TraceBundle, spec: MetricSpec) -> np.ndarray:
    if trace.prefill_attn is None:
        raise MetricUnavailableError("snapkv needs prefill_attn in the trace")
    spec.check(trace.shape.T)
    if trace.window_rows < spec.window_size:
        raise MetricUnavailableError(
            f"snapkv window {spec.window_size} exceeds the {trace.window_rows} stored observation rows")
    rows = trace.prefill_attn[:, :, -spec.window_size:, :].astype(np.float64)
    return max_pool_same(rows.mean(axis=2), spec.kernel_size)


def keydiff_score(trace: TraceBundle, spec: MetricSpec) -> np.ndarray:
    if trace.keys is None or trace.shape.d_h < 1:
        raise MetricUnavailableError("keydiff needs key vectors in the trace")
    return keydiff_from_keys(trace.keys.astype(np.float64))


def keydiff_from_keys(keys: np.ndarray) -> np.ndarray:
    """``-cos(key_j, mean key)`` over axis -2; zero keys score -1.

    If the mean key itself is zero there is no reference direction and every
    nonzero key scores 0.
    """
    mean = keys.mean(axis=-2, keepdims=True)
    knorm = np.linalg.norm(keys, axis=-1)
    mnorm = np.linalg.norm(mean, axis=-1)
    dots = (keys * mean).sum(axis=-1)
    denom = knorm * mnorm
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    score = -np.clip(cos, -1.0, 1.0)
    return np.where(knorm > 0, score, -1.0)


def compute_scores(trace: TraceBundle, spec: MetricSpec) -> np.ndarray:
    """Per-head score vectors, float64 ``[L, H, T]``."""
    if spec.kind == "snapkv":
        return snapkv_score(trace, spec)
    if spec.kind == "keydiff":
        return keydiff_score(trace, spec)
    return compute_oracle_importance(trace, normalize=True).values


def metric_ranking(scores: np.ndarray) -> Ranking:
    return descending_ranking(scores)
