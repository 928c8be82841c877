"""Eviction loss, hit/miss/false-positive decomposition and recall curves."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .oracle import ImportanceTensor, Ranking
from .trace_model import HeadIndex

_FLOOR_EPS = 1e-9


def floor_tokens(x: float) -> int:
    """``floor(x)`` that forgives representation error, e.g. (1 - 0.8) * 1000."""
    return int(math.floor(x + _FLOOR_EPS * max(1.0, abs(x))))


def budget_for_ratio(sigma: float, T: int) -> int:
    return min(T, max(0, floor_tokens((1.0 - sigma) * T)))


@dataclass(frozen=True, eq=False)
class LossCurve:
    head: HeadIndex
    values: np.ndarray  # [T + 1]

    @property
    def total_mass(self) -> float:
        return float(self.values[0])


@dataclass(frozen=True)
class SetDecomposition:
    hits: frozenset
    misses: frozenset
    false_positives: frozenset
    budget: int


@dataclass(frozen=True)
class GapDecomposition:
    heuristic_loss: float
    oracle_loss: float
    optimality_gap: float


def eviction_loss(importance: ImportanceTensor, head: HeadIndex, retained) -> float:
    head.check(importance.shape)
    I = importance.head(head.layer, head.head)
    mask = np.zeros(I.shape[0], dtype=bool)
    idx = np.asarray(sorted(retained), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= I.shape[0]):
        raise IndexError(f"retained positions must lie in 0..{I.shape[0] - 1}")
    mask[idx] = True
    return float(I[~mask].sum())


def ranked_gains(importance: ImportanceTensor, ranking: Ranking) -> np.ndarray:
    """Importance of the i-th ranked token, ``[L, H, T]``."""
    return np.take_along_axis(importance.values, ranking.order, axis=-1)


def loss_curves(importance: ImportanceTensor, ranking: Ranking) -> np.ndarray:
    """Loss after keeping each ranked prefix, ``[L, H, T + 1]``.

    Built as reverse cumulative sums so the curve ends at exactly 0 and is
    non-increasing without rounding artefacts.
    """
    g = ranked_gains(importance, ranking)
    tail = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
    zeros = np.zeros(g.shape[:-1] + (1,))
    return np.concatenate([tail, zeros], axis=-1)


def loss_curve(importance: ImportanceTensor, head: HeadIndex, ranking: Ranking) -> LossCurve:
    head.check(importance.shape)
    g = importance.head(head.layer, head.head)[ranking.head(head.layer, head.head)]
    tail = np.cumsum(g[::-1])[::-1]
    return LossCurve(head, np.append(tail, 0.0))


def decompose(importance: ImportanceTensor, head: HeadIndex, oracle_rank: Ranking,
              metric_rank: Ranking, b: int) -> tuple[SetDecomposition, GapDecomposition]:
    head.check(importance.shape)
    l, h = head.layer, head.head
    T = importance.shape.T
    if not 0 <= b <= T:
        raise ValueError(f"budget {b} outside 0..{T}")
    I = importance.head(l, h)
    oracle_set = set(oracle_rank.prefix(l, h, b).tolist())
    metric_set = set(metric_rank.prefix(l, h, b).tolist())
    hits = oracle_set & metric_set
    misses = oracle_set - metric_set
    fps = metric_set - oracle_set

    def mass(s):
        return float(I[sorted(s)].sum()) if s else 0.0

    def lost(kept):
        mask = np.ones(T, dtype=bool)
        mask[list(kept)] = False
        return float(I[mask].sum())

    gap = mass(misses) - mass(fps)
    sets = SetDecomposition(frozenset(hits), frozenset(misses), frozenset(fps), b)
    return sets, GapDecomposition(lost(metric_set), lost(oracle_set), gap)


def heuristic_loss(importance: ImportanceTensor, head: HeadIndex, ranking: Ranking, b: int) -> float:
    """Loss of keeping the top-``b`` of ``ranking``, summed directly over evicted positions."""
    l, h = head.layer, head.head
    return eviction_loss(importance, head, ranking.prefix(l, h, b).tolist())


def retained_mass(importance: ImportanceTensor, ranking: Ranking, budgets) -> np.ndarray:
    """Importance kept per head when each keeps its ranked prefix, summed in position order."""
    mask = ranking.prefix_mask(budgets)
    return np.where(mask, importance.values, 0.0).sum(axis=-1)


def recall_curve(importance: ImportanceTensor, head: HeadIndex, ranking: Ranking,
                 ratios) -> list[float]:
    head.check(importance.shape)
    T = importance.shape.T
    I = importance.head(head.layer, head.head)
    total = float(I.sum())
    order = ranking.head(head.layer, head.head)
    out = []
    for sigma in ratios:
        if not 0.0 <= sigma <= 1.0:
            raise ValueError(f"compression ratio {sigma} outside [0, 1]")
        if total <= 0:
            out.append(1.0)
            continue
        b = budget_for_ratio(sigma, T)
        mask = np.zeros(T, dtype=bool)
        mask[order[:b]] = True
        out.append(float(np.where(mask, I, 0.0).sum()) / total)
    return out


def recall_table(importance: ImportanceTensor, ranking: Ranking, ratios) -> np.ndarray:
    """Recall for every head and ratio, ``[L, H, len(ratios)]``."""
    T = importance.shape.T
    total = importance.values.sum(axis=-1)
    out = np.empty(total.shape + (len(ratios),))
    for i, sigma in enumerate(ratios):
        b = np.full(total.shape, budget_for_ratio(sigma, T))
        kept = retained_mass(importance, ranking, b)
        out[..., i] = np.divide(kept, total, out=np.ones_like(kept), where=total > 0)
    return out


def second_differences(curve: np.ndarray) -> np.ndarray:
    """``L(i+1) - 2 L(i) + L(i-1)`` for i = 1..T-1 (entry ``i - 1``)."""
    curve = np.asarray(curve, dtype=np.float64)
    return curve[2:] - 2.0 * curve[1:-1] + curve[:-2]


def second_difference_witness(importance: ImportanceTensor, head: HeadIndex,
                              ranking: Ranking) -> list[tuple[int, float]]:
    """Indices ``i`` (1-based prefix length) where the loss curve bends the wrong way.

    The second difference at ``i`` equals the importance of the i-th ranked
    token minus that of the (i+1)-th, so a negative value marks an inversion.
    Values are reported in that exact form; the curve-based second difference
    agrees with it to rounding, so near-ties cannot produce phantom witnesses.
    """
    if importance.shape.T < 2:
        raise ValueError("second differences need T >= 2")
    head.check(importance.shape)
    g = importance.head(head.layer, head.head)[ranking.head(head.layer, head.head)]
    steps = g[:-1] - g[1:]
    return [(i + 1, float(v)) for i, v in enumerate(steps) if v < 0]
