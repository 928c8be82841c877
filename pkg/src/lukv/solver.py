"""Budget allocation across heads.

Curves are arrays whose last axis runs over budgets ``0..T`` (``T + 1``
entries); any leading shape is allowed, typically ``(L, H)``, and returned
budgets keep that leading shape.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GuardrailError, InfeasibleBudgetError, InvalidCurveError
from .loss import LossCurve
from .trace_model import HeadIndex

CURVE_TOL = 1e-12
OBJECTIVE_TOL = 1e-9
BRUTE_MAX_HEADS = 5
BRUTE_MAX_T = 12
DEFAULT_ALPHA = 0.20
DEFAULT_BETA = 20.0
BASELINES = ("uniform", "pyramid", "adaptive")


# ---------------------------------------------------------------------------
# isotonic regression / convexification
# ---------------------------------------------------------------------------


def pava(y, increasing: bool = True, weights=None) -> np.ndarray:
    """Weighted least-squares projection of ``y`` onto monotone sequences."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n == 0:
        return y.copy()
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    sign = 1.0 if increasing else -1.0
    # blocks: [weighted sum, weight, count]; means compared on sign * y
    sums, wts, cnts = [], [], []
    for v, wi in zip(sign * y, w):
        sums.append(v * wi)
        wts.append(wi)
        cnts.append(1)
        while len(sums) > 1 and sums[-2] / wts[-2] > sums[-1] / wts[-1]:
            s, wt, c = sums.pop(), wts.pop(), cnts.pop()
            sums[-1] += s
            wts[-1] += wt
            cnts[-1] += c
    out = np.repeat([s / wt for s, wt in zip(sums, wts)], cnts)
    return sign * out


@dataclass(frozen=True, eq=False)
class ConvexLossCurve:
    head: HeadIndex | None
    values: np.ndarray  # [T + 1]
    gains: np.ndarray  # pooled first differences, [T]
    contact: np.ndarray  # bool [T + 1], surrogate touches the raw curve


@dataclass(frozen=True, eq=False)
class MarginalGains:
    head: HeadIndex | None
    values: np.ndarray  # g(1..T) stored at index 0..T-1


@dataclass(eq=False)
class BudgetAllocation:
    budgets: np.ndarray  # int64, leading shape of the input curves
    B_total: int
    objective: float
    solver: str
    relaxed_objective: float | None = None
    raw_objective: float | None = None

    def check(self, T: int) -> None:
        b = self.budgets
        if int(b.sum()) != self.B_total or b.min(initial=0) < 0 or b.max(initial=0) > T:
            raise AssertionError(f"{self.solver}: allocation violates the budget constraint")


def _raw_gains(values: np.ndarray, scale: float) -> np.ndarray:
    d = values[..., :-1] - values[..., 1:]
    if (d < -CURVE_TOL * scale).any():
        i = int(np.argwhere(d < -CURVE_TOL * scale)[0][-1])
        raise InvalidCurveError(f"loss curve increases between budget {i} and {i + 1}")
    return np.maximum(d, 0.0)


def convexify_values(values) -> tuple[np.ndarray, np.ndarray]:
    """Greatest convex minorant of one non-increasing curve via antitonic PAVA on its gains.

    Returns ``(surrogate, pooled_gains)``.
    """
    values = np.asarray(values, dtype=np.float64)
    scale = max(1.0, float(np.abs(values).max(initial=0.0)))
    gains = pava(_raw_gains(values, scale), increasing=False)
    surrogate = np.empty_like(values)
    surrogate[0] = values[0]
    surrogate[1:] = values[0] - np.cumsum(gains)
    surrogate[-1] = values[-1]  # pooling preserves the total; pin it exactly
    return surrogate, gains


def pava_convexify(curve: LossCurve | np.ndarray) -> ConvexLossCurve:
    head = curve.head if isinstance(curve, LossCurve) else None
    values = curve.values if isinstance(curve, LossCurve) else np.asarray(curve, dtype=np.float64)
    surrogate, gains = convexify_values(values)
    scale = max(1.0, float(np.abs(values).max(initial=0.0)))
    contact = np.abs(surrogate - values) <= CURVE_TOL * scale
    return ConvexLossCurve(head, surrogate, gains, contact)


def convexify_curves(curves: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch :func:`convexify_values` over the leading axes."""
    curves = np.asarray(curves, dtype=np.float64)
    flat = curves.reshape(-1, curves.shape[-1])
    surr = np.empty_like(flat)
    gains = np.empty((flat.shape[0], flat.shape[1] - 1))
    for i, row in enumerate(flat):
        surr[i], gains[i] = convexify_values(row)
    return surr.reshape(curves.shape), gains.reshape(curves.shape[:-1] + (curves.shape[-1] - 1,))


def marginal_gains(surrogate: ConvexLossCurve) -> MarginalGains:
    # the pooled block means; equal to L̆(i-1) - L̆(i) up to one rounding, but
    # exactly non-increasing, which the greedy tie-break relies on
    return MarginalGains(surrogate.head, surrogate.gains.copy())


# ---------------------------------------------------------------------------
# allocators
# ---------------------------------------------------------------------------


def _check_budget(B_total: int, capacity: int) -> int:
    if int(B_total) != B_total:
        raise ConfigError(f"B_total must be an integer, got {B_total!r}")
    B_total = int(B_total)
    if not 0 <= B_total <= capacity:
        raise InfeasibleBudgetError(f"B_total={B_total} outside feasible range 0..{capacity}")
    return B_total


def curve_objective(curves: np.ndarray, budgets: np.ndarray) -> float:
    """``sum of curve[b]`` over heads, accumulated in head order."""
    flat = np.asarray(curves, dtype=np.float64).reshape(-1, curves.shape[-1])
    picks = flat[np.arange(flat.shape[0]), np.asarray(budgets).reshape(-1)]
    total = 0.0
    for v in picks:
        total += v
    return float(total)


def greedy_allocate(gains: np.ndarray, B_total: int, surrogate: np.ndarray | None = None
                    ) -> BudgetAllocation:
    """Hand out budget one token at a time to the head with the largest next gain.

    Ties go to the lower flat head index (layer first, then head). With
    non-increasing gains per head this maximises the total gain, i.e. minimises
    the convexified loss. ``surrogate`` (the convex curves) is used to report
    the objective; without it the objective is the negated total gain.
    """
    gains = np.asarray(gains, dtype=np.float64)
    lead, T = gains.shape[:-1], gains.shape[-1]
    flat = gains.reshape(-1, T)
    n = flat.shape[0]
    B_total = _check_budget(B_total, n * T)
    budgets = np.zeros(n, dtype=np.int64)
    heap = [(-flat[i, 0], i) for i in range(n)] if T else []
    heapq.heapify(heap)
    gained = 0.0
    for _ in range(B_total):
        neg, i = heapq.heappop(heap)
        gained -= neg
        budgets[i] += 1
        if budgets[i] < T:
            heapq.heappush(heap, (-flat[i, budgets[i]], i))
    budgets = budgets.reshape(lead)
    if surrogate is not None:
        obj = curve_objective(surrogate, budgets)
    else:
        obj = -gained
    return BudgetAllocation(budgets, B_total, obj, "greedy", relaxed_objective=obj)


def greedy_order(gains: np.ndarray) -> np.ndarray:
    """Flat head index of every unit of budget in greedy order, ``[n * T]``.

    Greedy solutions are nested, so the allocation for budget ``B`` is the
    head count over the first ``B`` entries.
    """
    flat = np.asarray(gains, dtype=np.float64).reshape(-1, gains.shape[-1])
    n, T = flat.shape
    head = np.repeat(np.arange(n), T)
    step = np.tile(np.arange(T), n)
    order = np.lexsort((step, head, -flat.reshape(-1)))
    return head[order]


def greedy_allocate_many(gains: np.ndarray, budgets, surrogate: np.ndarray | None = None
                         ) -> list[BudgetAllocation]:
    gains = np.asarray(gains, dtype=np.float64)
    lead, T = gains.shape[:-1], gains.shape[-1]
    n = int(np.prod(lead, dtype=np.int64))
    seq = greedy_order(gains)
    out = []
    for B in budgets:
        B = _check_budget(B, n * T)
        b = np.bincount(seq[:B], minlength=n).astype(np.int64).reshape(lead)
        obj = curve_objective(surrogate, b) if surrogate is not None else -float(
            np.where(np.arange(T) < b[..., None], gains, 0.0).sum())
        out.append(BudgetAllocation(b, B, obj, "greedy", relaxed_objective=obj))
    return out


def _dp_tables(flat: np.ndarray, Bmax: int):
    """Min-plus DP over heads. Returns (best[Bmax+1], choice[n, Bmax+1])."""
    n, T1 = flat.shape
    T = T1 - 1
    prev = np.full(Bmax + 1, np.inf)
    prev[0] = 0.0
    choice = np.zeros((n, Bmax + 1), dtype=np.int32)
    reach = 0
    for i in range(n):
        new = np.full(Bmax + 1, np.inf)
        arg = choice[i]
        new_reach = min(Bmax, reach + T)
        for t in range(min(T, Bmax) + 1):
            hi = min(reach, Bmax - t)
            cand = prev[: hi + 1] + flat[i, t]
            seg = new[t: t + hi + 1]
            better = cand < seg
            seg[better] = cand[better]
            arg[t: t + hi + 1][better] = t
        prev, reach = new, new_reach
    return prev, choice


def _dp_traceback(choice: np.ndarray, B: int) -> np.ndarray:
    b = np.zeros(choice.shape[0], dtype=np.int64)
    rem = B
    for i in range(choice.shape[0] - 1, -1, -1):
        b[i] = choice[i, rem]
        rem -= b[i]
    assert rem == 0
    return b


def mckp_dp_allocate_many(curves: np.ndarray, budgets, solver: str = "dp") -> list[BudgetAllocation]:
    """Exact minimiser of ``sum curve[b]`` for several totals from one DP table."""
    curves = np.asarray(curves, dtype=np.float64)
    lead, T = curves.shape[:-1], curves.shape[-1] - 1
    flat = curves.reshape(-1, T + 1)
    cap = flat.shape[0] * T
    budgets = [_check_budget(B, cap) for B in budgets]
    if not budgets:
        return []
    best, choice = _dp_tables(flat, max(budgets))
    out = []
    for B in budgets:
        b = _dp_traceback(choice, B).reshape(lead)
        out.append(BudgetAllocation(b, B, float(best[B]), solver))
    return out


def mckp_dp_allocate(curves: np.ndarray, B_total: int, solver: str = "dp") -> BudgetAllocation:
    """Multiple-choice knapsack DP: each head picks one budget level, totals must match.

    Ties resolve to the smallest budget for the later head.
    """
    return mckp_dp_allocate_many(curves, [B_total], solver)[0]


def brute_force_allocate(curves: np.ndarray, B_total: int) -> BudgetAllocation:
    curves = np.asarray(curves, dtype=np.float64)
    lead, T = curves.shape[:-1], curves.shape[-1] - 1
    flat = curves.reshape(-1, T + 1)
    n = flat.shape[0]
    if n > BRUTE_MAX_HEADS or T > BRUTE_MAX_T:
        raise GuardrailError(f"brute force limited to {BRUTE_MAX_HEADS} heads and T <= {BRUTE_MAX_T}")
    B_total = _check_budget(B_total, n * T)
    best, best_b = math.inf, None
    for combo in itertools.product(range(T + 1), repeat=n):
        if sum(combo) != B_total:
            continue
        total = 0.0
        for i, t in enumerate(combo):
            total += flat[i, t]
        if total < best:
            best, best_b = total, combo
    return BudgetAllocation(np.array(best_b, dtype=np.int64).reshape(lead), B_total, best, "brute")


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def _split_even(total: int, parts: int) -> np.ndarray:
    q, r = divmod(total, parts)
    out = np.full(parts, q, dtype=np.int64)
    out[:r] += 1
    return out


def uniform_allocate(L: int, H: int, T: int, B_total: int) -> BudgetAllocation:
    B_total = _check_budget(B_total, L * H * T)
    b = _split_even(B_total, L * H).reshape(L, H)
    return BudgetAllocation(b, B_total, math.nan, "uniform")


def pyramid_layer_budgets(L: int, H: int, T: int, B_total: int, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Layer budgets on a linear ramp from ``2m - m/beta`` down to ``m/beta``.

    ``m`` is the mean layer budget. Floors are topped up from the shallowest
    layer and clipped to ``H * T`` with the excess passed to deeper layers,
    which keeps the sequence non-increasing.
    """
    if beta < 1:
        raise ConfigError("pyramid beta must be >= 1")
    B_total = _check_budget(B_total, L * H * T)
    mean = B_total / L
    last = mean / beta
    first = 2.0 * mean - last
    ramp = np.array([mean]) if L == 1 else first + (last - first) * np.arange(L) / (L - 1)
    layer = np.floor(ramp + 1e-9).astype(np.int64)
    rem = B_total - int(layer.sum())
    if rem < 0:  # floor guard overshot by one somewhere
        layer = np.floor(ramp).astype(np.int64)
        rem = B_total - int(layer.sum())
    layer[:rem] += 1
    cap = H * T
    carry = 0
    for i in range(L):
        layer[i] += carry
        carry = max(0, int(layer[i]) - cap)
        layer[i] -= carry
    i = 0
    while carry:
        room = cap - int(layer[i])
        add = min(room, carry)
        layer[i] += add
        carry -= add
        i += 1
    return layer


def pyramid_allocate(L: int, H: int, T: int, B_total: int, beta: float = DEFAULT_BETA) -> BudgetAllocation:
    layer = pyramid_layer_budgets(L, H, T, B_total, beta)
    b = np.stack([_split_even(int(x), H) for x in layer])
    return BudgetAllocation(b, int(B_total), math.nan, "pyramid")


def adaptive_allocate(scores: np.ndarray, B_total: int, alpha: float = DEFAULT_ALPHA) -> BudgetAllocation:
    """Layer-constrained head-adaptive top-k.

    Each layer gets an even share of the budget. Inside a layer the safeguard
    ``floor(alpha * share)`` is split evenly over heads (so every head gets at
    least ``floor(alpha * share / H)``), and the rest of the share goes to the
    highest-scoring tokens pooled over that layer's heads.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must be in [0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    L, H, T = scores.shape
    B_total = _check_budget(B_total, L * H * T)
    layer_budget = _split_even(B_total, L)
    sorted_scores = -np.sort(-scores, axis=-1, kind="stable")
    budgets = np.zeros((L, H), dtype=np.int64)
    heads = np.repeat(np.arange(H), T)
    steps = np.tile(np.arange(T), H)
    for l in range(L):
        reserved = min(H * T, math.floor(alpha * layer_budget[l] + 1e-9))
        base = _split_even(reserved, H)
        budgets[l] = base
        rest = int(layer_budget[l]) - reserved
        if rest <= 0:
            continue
        # each head competes with the tokens after its guaranteed prefix
        free = steps >= base[heads]
        pool = sorted_scores[l].reshape(-1)[free]
        order = np.lexsort((steps[free], heads[free], -pool))
        budgets[l] += np.bincount(heads[free][order[:rest]], minlength=H)
    return BudgetAllocation(budgets, B_total, math.nan, "adaptive")


def baseline_allocate(kind: str, shape: tuple[int, int, int], B_total: int, scores=None,
                      alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> BudgetAllocation:
    L, H, T = shape
    if kind == "uniform":
        return uniform_allocate(L, H, T, B_total)
    if kind == "pyramid":
        return pyramid_allocate(L, H, T, B_total, beta)
    if kind in ("adaptive", "adaptive_topk"):
        if scores is None:
            raise ConfigError("adaptive allocation needs per-token metric scores")
        return adaptive_allocate(scores, B_total, alpha)
    raise ConfigError(f"unknown baseline {kind!r}")
