"""Invariant suite behind ``lukv selftest``.

Every check is deterministic (fixed seeds) and returns a :class:`CheckResult`.
The exhaustive and lower-hull references used here are independent of the
code paths they verify.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluate import PipelineConfig, TraceAnalysis, run_pipeline
from .loss import decompose, loss_curve, recall_table, second_difference_witness, second_differences
from .metrics import MetricSpec
from .oracle import compute_oracle_importance, oracle_ranking
from .profile import (
    DEFAULT_GRID,
    Profile,
    Safeguards,
    apply_eviction,
    budget_from_ratios,
    build_profile,
)
from .solver import (
    brute_force_allocate,
    convexify_curves,
    curve_objective,
    greedy_allocate,
    mckp_dp_allocate,
    mckp_dp_allocate_many,
    pava_convexify,
)
from .trace_model import HeadIndex, ModelShape, generate_synthetic_trace, load_trace, save_trace

SIGMAS = DEFAULT_GRID


@dataclass
class CheckResult:
    key: str
    title: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.key} {self.title}: {self.detail} ({self.seconds:.1f}s)"


def random_curves(rng, n_heads: int, T: int, convex: bool = False) -> np.ndarray:
    """Non-increasing loss curves ``[n_heads, T + 1]`` with per-head mass at most 1."""
    kind = rng.integers(3)
    if kind == 0:
        g = rng.exponential(size=(n_heads, T))
    elif kind == 1:
        g = rng.exponential(size=(n_heads, T)) * (rng.random((n_heads, T)) < 0.3)
    else:
        g = rng.pareto(1.5, size=(n_heads, T))
    if convex:
        g = -np.sort(-g, axis=-1)
    mass = g.sum(axis=-1, keepdims=True)
    g = np.divide(g, mass, out=np.zeros_like(g), where=mass > 0) * rng.random((n_heads, 1))
    tail = np.cumsum(g[:, ::-1], axis=-1)[:, ::-1]
    return np.concatenate([tail, np.zeros((n_heads, 1))], axis=-1)


def lower_hull_minorant(values) -> np.ndarray:
    """Greatest convex minorant of points ``(i, values[i])`` via a monotone-chain lower hull."""
    y = np.asarray(values, dtype=np.float64)
    hull: list[int] = []
    for i in range(y.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b if it lies on or above the segment a -> i
            if (y[b] - y[a]) * (i - a) >= (y[i] - y[a]) * (b - a):
                hull.pop()
            else:
                break
        hull.append(i)
    return np.interp(np.arange(y.size), hull, y[hull])


def _is_convex_curve(c: np.ndarray) -> bool:
    g = c[:-1] - c[1:]
    return bool(np.all(g[:-1] >= g[1:]))


# ---------------------------------------------------------------------------


def check_greedy_equals_dp(n_instances: int = 200, levels: int = 5, seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for _ in range(n_instances):
        n = int(rng.integers(1, 65))
        T = int(rng.integers(1, 257))
        curves = random_curves(rng, n, T)
        surrogate, gains = convexify_curves(curves)
        cap = n * T
        totals = sorted({0, cap, *rng.integers(0, cap + 1, size=levels - 2).tolist()})
        while len(totals) < levels and len(totals) < cap + 1:
            totals = sorted(set(totals) | {int(rng.integers(0, cap + 1))})
        dp = mckp_dp_allocate_many(surrogate, totals)
        for B, ref in zip(totals, dp):
            g = greedy_allocate(gains, B, surrogate)
            worst = max(worst, abs(g.objective - ref.objective))
            count += 1
    ok = worst <= 1e-9
    return ok, f"{count} solves, max |greedy - DP| = {worst:.3e}"


def check_dp_equals_brute(n_instances: int = 100, seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mismatches, solves, convex_nonzero, min_gap, max_gap = 0, 0, 0, math.inf, 0.0
    for k in range(n_instances):
        n = int(rng.integers(1, 5))
        T = int(rng.integers(1, 11))
        curves = random_curves(rng, n, T, convex=(k % 3 == 0))
        all_convex = all(_is_convex_curve(c) for c in curves)
        surrogate, gains = convexify_curves(curves)
        for B in range(n * T + 1):
            dp = mckp_dp_allocate(curves, B)
            bf = brute_force_allocate(curves, B)
            solves += 1
            if dp.objective != bf.objective:
                mismatches += 1
            g = greedy_allocate(gains, B, surrogate)
            gap = curve_objective(curves, g.budgets) - dp.objective
            min_gap, max_gap = min(min_gap, gap), max(max_gap, gap)
            if all_convex and abs(gap) > 1e-9:
                convex_nonzero += 1
    ok = mismatches == 0 and min_gap >= 0 and convex_nonzero == 0
    return ok, (f"{solves} solves, DP/brute mismatches {mismatches}, greedy raw gap in "
                f"[{min_gap:.3e}, {max_gap:.3e}], nonzero gaps on convex instances {convex_nonzero}")


def check_pava_gcm(n_curves: int = 500, seed: int = 3) -> tuple[bool, str]:
    example = pava_convexify(np.array([10.0, 6.0, 5.0, 1.0, 0.0])).values
    example_ok = example.tolist() == [10.0, 6.0, 3.5, 1.0, 0.0]
    rng = np.random.default_rng(seed)
    worst, bad_inv = 0.0, 0
    for _ in range(n_curves):
        T = int(rng.integers(1, 65))
        raw = random_curves(rng, 1, T)[0]
        surr = pava_convexify(raw).values
        worst = max(worst, float(np.abs(surr - lower_hull_minorant(raw)).max()))
        d2 = second_differences(surr) if T >= 2 else np.zeros(0)
        if (np.diff(surr) > 1e-12).any() or (d2 < -1e-12).any() or (surr > raw + 1e-12).any() \
                or surr[0] != raw[0] or surr[-1] != raw[-1]:
            bad_inv += 1
    ok = example_ok and worst <= 1e-9 and bad_inv == 0
    return ok, (f"worked example {'exact' if example_ok else example.tolist()}, max |PAVA - hull| "
                f"= {worst:.3e}, invariant failures {bad_inv}")


def _bundles(n: int, scenario: str, shape=ModelShape(2, 4, 64, 8, 16), start: int = 0):
    return [generate_synthetic_trace(shape, s, scenario) for s in range(start, start + n)]


def check_decomposition(n_triples: int = 1000, seed: int = 4) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    bundles = _bundles(5, "mixed", start=100)
    analyses = {(i, m): TraceAnalysis.build(b, MetricSpec(m))
                for i, b in enumerate(bundles) for m in ("snapkv", "keydiff")}
    worst, negative = 0.0, 0
    for _ in range(n_triples):
        i = int(rng.integers(len(bundles)))
        m = ("snapkv", "keydiff")[int(rng.integers(2))]
        an = analyses[(i, m)]
        s = an.trace.shape
        head = HeadIndex(int(rng.integers(s.L)), int(rng.integers(s.H)))
        b = int(rng.integers(s.T + 1))
        _, gap = decompose(an.importance, head, an.oracle, an.ranking, b)
        resid = gap.heuristic_loss - gap.oracle_loss - gap.optimality_gap
        scale = max(abs(gap.heuristic_loss), np.finfo(float).tiny)
        worst = max(worst, abs(resid) / scale if gap.heuristic_loss else abs(resid))
        negative += gap.optimality_gap < 0
    ok = worst <= 1e-12 and negative == 0
    return ok, f"{n_triples} triples, max relative residual {worst:.3e}, negative gaps {negative}"


def check_recall_ordering(n_bundles: int = 20) -> tuple[bool, str]:
    violations, compared = 0, 0
    for b in _bundles(n_bundles, "mixed", start=200):
        imp = compute_oracle_importance(b, normalize=True)
        oracle = recall_table(imp, oracle_ranking(imp), SIGMAS)
        for m in ("snapkv", "keydiff"):
            an = TraceAnalysis.build(b, MetricSpec(m))
            heur = recall_table(an.importance, an.ranking, SIGMAS)
            violations += int((oracle < heur).sum())
            compared += heur.size
    return violations == 0, f"{compared} (head, sigma, metric) comparisons, {violations} violations"


def check_nonconvexity_witness(n_bundles: int = 10) -> tuple[bool, str]:
    worst, no_witness = 0.0, 0
    for b in _bundles(n_bundles, "misaligned", start=300):
        an = TraceAnalysis.build(b, MetricSpec("snapkv"))
        found = False
        for head in b.shape.heads():
            curve = loss_curve(an.importance, head, an.ranking).values
            g = an.importance.head(head.layer, head.head)[an.ranking.head(head.layer, head.head)]
            worst = max(worst, float(np.abs(second_differences(curve) - (g[:-1] - g[1:])).max()))
            found = found or bool(second_difference_witness(an.importance, head, an.ranking))
        no_witness += not found
    ok = worst <= 1e-12 and no_witness == 0
    return ok, f"max |second difference - importance step| = {worst:.3e}, bundles without witness {no_witness}"


def check_lukv_ordering(n_bundles: int = 10, calibration: int = 10) -> tuple[bool, str]:
    cfg = PipelineConfig(
        shape=(4, 8, 128, 16, 16), scenario="misaligned",
        calibration_seeds=list(range(1000, 1000 + calibration)),
        eval_seeds=list(range(400, 400 + n_bundles)), metrics=["snapkv"], sigma_target=0.8,
        allocators=["uniform", "adaptive", "lukv"], compare_sigmas=[])
    with tempfile.TemporaryDirectory() as tmp:
        totals = run_pipeline(cfg, tmp)
    wins, ratios = 0, []
    for seed in cfg.eval_seeds:
        ours = totals[(seed, "snapkv", "lukv")]
        base = min(totals[(seed, "snapkv", "uniform")], totals[(seed, "snapkv", "adaptive")])
        wins += ours < base
        ratios.append(ours / base)
    return wins == n_bundles, (f"LU-KV below uniform and adaptive on {wins}/{n_bundles} bundles, "
                               f"loss ratio vs best baseline {min(ratios):.3f}..{max(ratios):.3f}")


def check_safeguards_and_formats() -> tuple[bool, str]:
    problems = []
    sg = Safeguards()
    if budget_from_ratios(np.array([0.8]), 1000, Safeguards(0, 0))[0] != 200:
        problems.append("r=0.8, T=1000 did not give 200")
    if budget_from_ratios(np.array([1.0]), 100, sg)[0] != sg.sink_size + sg.recent_window:
        problems.append("0.99 cap / safeguard floor")
    rng = np.random.default_rng(8)
    r = rng.random((64,))
    b = budget_from_ratios(r, 512, sg)
    expect = np.maximum(np.floor((1 - np.minimum(r, 0.99)) * 512 + 1e-9), 36)
    if not np.array_equal(b, expect.astype(int)):
        problems.append("floor budgeting")

    shape = ModelShape(2, 4, 96, 4, 8)
    bundles = [generate_synthetic_trace(shape, s, "mixed") for s in (11, 12, 13)]
    spec = MetricSpec("snapkv")
    prof = build_profile(bundles, spec, grid=(0.5, 0.8, 0.9))
    for sigma in (0.5, 0.8, 0.95):
        from .profile import lookup_ratios

        budgets = budget_from_ratios(lookup_ratios(prof, sigma), shape.T, sg)
        an = TraceAnalysis.build(bundles[0], spec)
        keep = apply_eviction(an.ranking.order, budgets, sg)
        if not keep[..., : sg.sink_size].all():
            problems.append(f"sink missing at sigma={sigma}")
        if not np.array_equal(keep.sum(axis=-1), budgets):
            problems.append(f"retained size != budget at sigma={sigma}")

    with tempfile.TemporaryDirectory() as tmp:
        d1, d2 = Path(tmp, "a"), Path(tmp, "b")
        save_trace(bundles[0], d1)
        save_trace(load_trace(d1), d2)
        for f in sorted(d1.glob("*.f32")):
            if f.read_bytes() != (d2 / f.name).read_bytes():
                problems.append(f"trace tensor {f.name} not byte-identical")
        if not load_trace(d2).equals(bundles[0]):
            problems.append("trace roundtrip not element-wise equal")
        p1 = prof.save(Path(tmp, "p1.json"))
        p2 = Profile.load(p1).save(Path(tmp, "p2.json"))
        if p1.read_bytes() != p2.read_bytes():
            problems.append("profile roundtrip not byte-identical")
    return not problems, "; ".join(problems) or "sinks kept, floor/cap budgets, trace+profile roundtrips byte-identical"


CHECKS = [
    ("C1", "greedy equals DP on convexified curves", check_greedy_equals_dp),
    ("C2", "DP equals brute force; greedy raw gap", check_dp_equals_brute),
    ("C3", "PAVA equals greatest convex minorant", check_pava_gcm),
    ("C4", "loss decomposition identity", check_decomposition),
    ("C5", "oracle recall dominates metric recall", check_recall_ordering),
    ("C6", "second-difference non-convexity witness", check_nonconvexity_witness),
    ("C7", "LU-KV loss below uniform and adaptive at 80% compression", check_lukv_ordering),
    ("C8", "safeguards and serialization", check_safeguards_and_formats),
]


def run_check(key: str) -> CheckResult:
    for k, title, fn in CHECKS:
        if k == key:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failed check, not an aborted suite
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            return CheckResult(k, title, ok, detail, time.perf_counter() - t0)
    raise KeyError(key)


def run_selftest(keys=None, echo=print) -> list[CheckResult]:
    results = []
    for k, _, _ in CHECKS:
        if keys and k not in keys:
            continue
        res = run_check(k)
        echo(res.line())
        results.append(res)
    return results
