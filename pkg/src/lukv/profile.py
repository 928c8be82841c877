"""Offline compression profiles and their online use.

Offline: for each calibration trace, solve the convexified allocation over a
grid of global compression ratios and record each head's local compression
ratio; average over traces. Online: look up local ratios for a target ratio,
turn them into integer budgets, and keep sinks, the recent window and the
metric's top tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .loss import floor_tokens, loss_curves
from .metrics import MetricSpec, compute_scores, metric_ranking
from .oracle import compute_oracle_importance
from .solver import convexify_curves, greedy_allocate_many, pava
from .trace_model import TraceBundle

SCHEMA_VERSION = 1
DEFAULT_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
DEFAULT_R_CAP = 0.99
DEFAULT_SINK = 4


@dataclass(frozen=True)
class Safeguards:
    sink_size: int = DEFAULT_SINK
    recent_window: int = 32
    max_compression: float = 0.99

    def __post_init__(self):
        if self.sink_size < 0 or self.recent_window < 0:
            raise ConfigError("sink_size and recent_window must be nonnegative")
        if not 0.0 < self.max_compression <= 1.0:
            raise ConfigError("max_compression must be in (0, 1]")

    @classmethod
    def for_metric(cls, spec: MetricSpec, **overrides) -> "Safeguards":
        return cls(**{"recent_window": spec.window_size, **overrides})

    @classmethod
    def disabled(cls) -> "Safeguards":
        return cls(sink_size=0, recent_window=0, max_compression=1.0)

    @property
    def min_budget_fixed(self) -> int:
        return self.sink_size + self.recent_window

    def as_dict(self) -> dict:
        return {"sink": self.sink_size, "window": self.recent_window,
                "max_compression": self.max_compression}


@dataclass(eq=False)
class Profile:
    metric: str
    L: int
    H: int
    grid: np.ndarray  # [G], strictly increasing
    ratios: np.ndarray  # [L, H, G]
    M: int
    r_cap: float = DEFAULT_R_CAP
    safeguards: Safeguards = field(default_factory=Safeguards)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if self.grid.ndim != 1 or self.grid.size == 0:
            raise ValidationError("profile grid must be a non-empty list")
        if np.any(np.diff(self.grid) <= 0):
            raise ValidationError("profile grid must be strictly increasing")
        if self.ratios.shape != (self.L, self.H, self.grid.size):
            raise ValidationError(f"ratios have dims {self.ratios.shape}, expected "
                                  f"{(self.L, self.H, self.grid.size)}")
        if (self.ratios < 0).any() or (self.ratios > self.r_cap).any():
            raise ValidationError("profile ratios must lie in [0, r_cap]")

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "metric": self.metric,
            "L": self.L,
            "H": self.H,
            "grid": [float(x) for x in self.grid],
            "ratios": self.ratios.tolist(),
            "M": self.M,
            "r_cap": float(self.r_cap),
            "safeguards": self.safeguards.as_dict(),
        }
        # json writes floats with repr(), the shortest string that round-trips
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Profile":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported profile schema_version {doc.get('schema_version')!r}")
        sg = doc.get("safeguards", {})
        return cls(
            metric=doc["metric"], L=int(doc["L"]), H=int(doc["H"]), grid=doc["grid"],
            ratios=doc["ratios"], M=int(doc["M"]), r_cap=float(doc["r_cap"]),
            safeguards=Safeguards(int(sg.get("sink", DEFAULT_SINK)), int(sg.get("window", 32)),
                                  float(sg.get("max_compression", DEFAULT_R_CAP))),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "Profile":
        return cls.from_json(Path(path).read_text())


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(list(grid), dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("empty ratio grid")
    if (grid < 0).any() or (grid > 1).any():
        raise ConfigError("grid ratios must lie in [0, 1]")
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("grid must be strictly increasing")
    return grid


def solve_ratio_grid(trace: TraceBundle, metric: MetricSpec, grid) -> np.ndarray:
    """Optimal local compression ratio per head at each grid point, ``[L, H, G]``."""
    grid = _check_grid(grid)
    s = trace.shape
    importance = compute_oracle_importance(trace, normalize=True)
    ranking = metric_ranking(compute_scores(trace, metric))
    surrogate, gains = convexify_curves(loss_curves(importance, ranking))
    capacity = s.L * s.H * s.T
    budgets = [floor_tokens((1.0 - rho) * capacity) for rho in grid]
    allocs = greedy_allocate_many(gains, budgets, surrogate)
    return np.stack([1.0 - a.budgets / s.T for a in allocs], axis=-1)


def aggregate_profile(per_query, grid, metric: str = "snapkv", r_cap: float = DEFAULT_R_CAP,
                      safeguards: Safeguards | None = None) -> Profile:
    """Mean over queries, clamp to ``[0, r_cap]``, then make each head non-decreasing along the grid."""
    per_query = [np.asarray(r, dtype=np.float64) for r in per_query]
    if not per_query:
        raise ConfigError("need at least one per-query ratio tensor")
    grid = _check_grid(grid)
    first = per_query[0].shape
    if len(first) != 3 or first[-1] != grid.size:
        raise ValidationError(f"ratio tensor dims {first} do not match a grid of {grid.size}")
    if any(r.shape != first for r in per_query):
        raise ValidationError("per-query ratio tensors disagree in shape")
    mean = np.mean(np.stack(per_query), axis=0)
    clamped = np.clip(mean, 0.0, r_cap)
    mono = np.apply_along_axis(pava, -1, clamped)
    L, H, _ = first
    return Profile(metric, L, H, grid, np.clip(mono, 0.0, r_cap), len(per_query), r_cap,
                   safeguards if safeguards is not None else Safeguards())


def build_profile(traces, metric: MetricSpec, grid=DEFAULT_GRID, r_cap: float = DEFAULT_R_CAP,
                  safeguards: Safeguards | None = None) -> Profile:
    per_query = [solve_ratio_grid(t, metric, grid) for t in traces]
    sg = safeguards if safeguards is not None else Safeguards.for_metric(metric)
    return aggregate_profile(per_query, grid, metric.kind, r_cap, sg)


def lookup_ratios(profile: Profile, sigma_target: float) -> np.ndarray:
    """Local ratios ``[L, H]`` at ``sigma_target``; linear between grid points, clamped outside."""
    if profile.grid.size == 0:
        raise ValidationError("empty profile")
    if not 0.0 <= sigma_target <= 1.0:
        raise ConfigError(f"sigma_target {sigma_target} outside [0, 1]")
    grid = profile.grid
    hit = np.flatnonzero(grid == sigma_target)
    if hit.size:
        return profile.ratios[..., hit[0]].copy()
    if sigma_target <= grid[0]:
        return profile.ratios[..., 0].copy()
    if sigma_target >= grid[-1]:
        return profile.ratios[..., -1].copy()
    hi = int(np.searchsorted(grid, sigma_target))
    lo = hi - 1
    w = (sigma_target - grid[lo]) / (grid[hi] - grid[lo])
    return (1.0 - w) * profile.ratios[..., lo] + w * profile.ratios[..., hi]


def budget_from_ratios(ratios, T: int, safeguards: Safeguards, exact_total: int | None = None
                       ) -> np.ndarray:
    """Integer budgets ``floor((1 - r) * T)`` with the safeguard floors applied.

    With ``exact_total`` the shortfall against that global total is handed out
    one token per head by largest fractional part (ties to the lower head index)
    before the safeguard floors are applied.
    """
    if T < safeguards.min_budget_fixed:
        raise ConfigError(f"T={T} is smaller than sink + recent window "
                          f"({safeguards.sink_size} + {safeguards.recent_window})")
    r = np.asarray(ratios, dtype=np.float64)
    if (r < 0).any() or (r > 1).any() or np.isnan(r).any():
        raise ConfigError("local ratios must lie in [0, 1]")
    r = np.minimum(r, safeguards.max_compression)
    keep = (1.0 - r) * T
    b = np.floor(keep + 1e-9 * np.maximum(1.0, keep)).astype(np.int64)
    if exact_total is not None:
        short = int(exact_total) - int(b.sum())
        if short > 0:
            frac = (keep - b).reshape(-1)
            room = (b.reshape(-1) < T)
            cand = np.lexsort((np.arange(frac.size), -frac))
            cand = cand[room[cand]][:short]
            flat = b.reshape(-1)
            flat[cand] += 1
            b = flat.reshape(b.shape)
    min_keep = max(safeguards.min_budget_fixed,
                   math.ceil((1.0 - safeguards.max_compression) * T - 1e-9))
    return np.clip(np.maximum(b, min_keep), 0, T)


def apply_eviction(ranking_order: np.ndarray, budgets, safeguards: Safeguards) -> np.ndarray:
    """Boolean keep-mask ``[..., T]``: sinks, then the recent window, then ranked fill.

    Exactly ``budgets`` positions are kept per head; if a budget is below the
    safeguard footprint the sinks win over the window.
    """
    order = np.asarray(ranking_order)
    T = order.shape[-1]
    budgets = np.broadcast_to(np.asarray(budgets, dtype=np.int64), order.shape[:-1])
    if (budgets < 0).any() or (budgets > T).any():
        raise ConfigError("budgets must lie in 0..T")
    sink = min(safeguards.sink_size, T)
    window = min(safeguards.recent_window, T)
    priority = np.concatenate([np.arange(sink), np.arange(T - window, T)])
    flat_order = order.reshape(-1, T)
    flat_b = budgets.reshape(-1)
    keep = np.zeros(flat_order.shape, dtype=bool)
    for i in range(flat_order.shape[0]):
        seq = np.concatenate([priority, flat_order[i]])
        _, first = np.unique(seq, return_index=True)
        seq = seq[np.sort(first)]
        keep[i, seq[: flat_b[i]]] = True
    return keep.reshape(order.shape)
