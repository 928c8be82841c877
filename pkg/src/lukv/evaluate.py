"""Loss reports, greedy-vs-DP comparisons and the end-to-end pipeline."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvariantViolation, SizeMismatchError
from .loss import budget_for_ratio, floor_tokens, loss_curves, recall_table, retained_mass
from .metrics import MetricSpec, compute_scores, metric_ranking
from .oracle import ImportanceTensor, Ranking, compute_oracle_importance, oracle_ranking
from .profile import DEFAULT_GRID, Profile, Safeguards, budget_from_ratios, build_profile, lookup_ratios
from .solver import (
    OBJECTIVE_TOL,
    BudgetAllocation,
    baseline_allocate,
    convexify_curves,
    curve_objective,
    greedy_allocate,
    greedy_allocate_many,
    mckp_dp_allocate_many,
)
from .trace_model import ModelShape, TraceBundle, generate_synthetic_trace

log = logging.getLogger(__name__)

ALLOCATION_SCHEMA = 1
RECALL_SIGMAS = DEFAULT_GRID
PIPELINE_ALLOCATORS = ("uniform", "pyramid", "adaptive", "lukv", "lukv_insample")


@dataclass
class EvalReport:
    head_loss: np.ndarray  # [L, H]
    layer_loss: np.ndarray  # [L]
    total_loss: float
    budgets: np.ndarray
    recall: dict = field(default_factory=dict)  # metric -> [L, H, S]
    solver_pairs: list = field(default_factory=list)

    def check(self, tol: float = 1e-9) -> None:
        if not np.allclose(self.head_loss.sum(axis=1), self.layer_loss, rtol=0, atol=tol):
            raise InvariantViolation("per-layer loss differs from the sum of its heads")
        if abs(float(self.layer_loss.sum()) - self.total_loss) > tol:
            raise InvariantViolation("total loss differs from the sum of layers")


@dataclass
class TraceAnalysis:
    """Everything derived from one trace under one metric."""

    trace: TraceBundle
    metric: MetricSpec
    importance: ImportanceTensor
    scores: np.ndarray
    ranking: Ranking
    oracle: Ranking
    curves: np.ndarray
    surrogate: np.ndarray
    gains: np.ndarray

    @classmethod
    def build(cls, trace: TraceBundle, metric: MetricSpec) -> "TraceAnalysis":
        importance = compute_oracle_importance(trace, normalize=True)
        scores = compute_scores(trace, metric)
        ranking = metric_ranking(scores)
        curves = loss_curves(importance, ranking)
        surrogate, gains = convexify_curves(curves)
        return cls(trace, metric, importance, scores, ranking, oracle_ranking(importance),
                   curves, surrogate, gains)

    @property
    def capacity(self) -> int:
        s = self.trace.shape
        return s.L * s.H * s.T

    def budget_total(self, sigma: float) -> int:
        return floor_tokens((1.0 - sigma) * self.capacity)

    def objectives(self, budgets) -> tuple[float, float]:
        return curve_objective(self.surrogate, budgets), curve_objective(self.curves, budgets)


def evaluate_allocation(trace: TraceBundle | TraceAnalysis, metric: MetricSpec | None,
                        allocation: BudgetAllocation | np.ndarray) -> EvalReport:
    """Oracle loss of keeping each head's metric-ranked prefix of its budget."""
    an = trace if isinstance(trace, TraceAnalysis) else TraceAnalysis.build(trace, metric)
    budgets = allocation.budgets if isinstance(allocation, BudgetAllocation) else np.asarray(allocation)
    s = an.trace.shape
    if budgets.shape != (s.L, s.H):
        raise SizeMismatchError(f"allocation dims {budgets.shape} do not match trace ({s.L}, {s.H})")
    if (budgets < 0).any() or (budgets > s.T).any():
        raise ConfigError("budgets must lie in 0..T")
    head = an.importance.head_mass() - retained_mass(an.importance, an.ranking, budgets)
    head = np.maximum(head, 0.0)
    layer = head.sum(axis=1)
    report = EvalReport(head, layer, float(layer.sum()), np.asarray(budgets, dtype=np.int64))
    report.check()
    return report


def recall_curves(an: TraceAnalysis, sigmas=RECALL_SIGMAS) -> dict[str, np.ndarray]:
    return {"oracle": recall_table(an.importance, an.oracle, sigmas),
            an.metric.kind: recall_table(an.importance, an.ranking, sigmas)}


@dataclass
class CompareRow:
    sigma: float
    B_total: int
    greedy_relaxed: float
    dp_convex: float
    dp_raw: float
    greedy_raw: float

    @property
    def raw_gap(self) -> float:
        return self.greedy_raw - self.dp_raw


def compare_solvers(trace: TraceBundle | TraceAnalysis, metric: MetricSpec | None, ratios
                    ) -> list[CompareRow]:
    """Greedy on the convexified curves against exact DP on convexified and raw curves."""
    an = trace if isinstance(trace, TraceAnalysis) else TraceAnalysis.build(trace, metric)
    totals = [an.budget_total(s) for s in ratios]
    greedy = greedy_allocate_many(an.gains, totals, an.surrogate)
    dp_convex = mckp_dp_allocate_many(an.surrogate, totals)
    dp_raw = mckp_dp_allocate_many(an.curves, totals)
    rows = []
    for sigma, g, dc, dr in zip(ratios, greedy, dp_convex, dp_raw):
        row = CompareRow(float(sigma), g.B_total, g.objective, dc.objective, dr.objective,
                         curve_objective(an.curves, g.budgets))
        if abs(row.greedy_relaxed - row.dp_convex) > OBJECTIVE_TOL:
            raise InvariantViolation(
                f"greedy relaxed objective {row.greedy_relaxed!r} != DP {row.dp_convex!r} at sigma={sigma}")
        if row.raw_gap < -OBJECTIVE_TOL:
            raise InvariantViolation(f"greedy beat the exact DP on raw curves at sigma={sigma}")
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# allocation files
# ---------------------------------------------------------------------------


def allocation_to_dict(alloc: BudgetAllocation, metric: str) -> dict:
    return {
        "schema_version": ALLOCATION_SCHEMA,
        "metric": metric,
        "B_total": int(alloc.B_total),
        "solver": alloc.solver,
        "budgets": np.asarray(alloc.budgets).astype(int).tolist(),
        "relaxed_objective": alloc.relaxed_objective,
        "raw_objective": alloc.raw_objective,
    }


def write_allocation(path, alloc: BudgetAllocation, metric: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(allocation_to_dict(alloc, metric), indent=1) + "\n")
    return path


def read_allocation(path) -> tuple[BudgetAllocation, str]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != ALLOCATION_SCHEMA:
        raise ConfigError(f"unsupported allocation schema_version {doc.get('schema_version')!r}")
    b = np.asarray(doc["budgets"], dtype=np.int64)
    alloc = BudgetAllocation(b, int(doc["B_total"]), float("nan"), doc.get("solver", "unknown"),
                             doc.get("relaxed_objective"), doc.get("raw_objective"))
    return alloc, doc.get("metric", "snapkv")


def solve(an: TraceAnalysis, solver: str, B_total: int, alpha=None, beta=None) -> BudgetAllocation:
    """Allocate ``B_total`` with the named solver and fill in both objectives."""
    from .solver import DEFAULT_ALPHA, DEFAULT_BETA, brute_force_allocate, mckp_dp_allocate

    s = an.trace.shape
    if solver == "greedy":
        alloc = greedy_allocate(an.gains, B_total, an.surrogate)
    elif solver == "dp":
        alloc = mckp_dp_allocate(an.curves, B_total)
    elif solver == "dp_convex":
        alloc = mckp_dp_allocate(an.surrogate, B_total, solver="dp_convex")
    elif solver == "brute":
        alloc = brute_force_allocate(an.curves, B_total)
    elif solver in ("uniform", "pyramid", "adaptive"):
        alloc = baseline_allocate(solver, (s.L, s.H, s.T), B_total, scores=an.scores,
                                  alpha=DEFAULT_ALPHA if alpha is None else alpha,
                                  beta=DEFAULT_BETA if beta is None else beta)
    else:
        raise ConfigError(f"unknown solver {solver!r}")
    alloc.relaxed_objective, alloc.raw_objective = an.objectives(alloc.budgets)
    if np.isnan(alloc.objective):
        alloc.objective = alloc.raw_objective
    alloc.check(s.T)
    return alloc


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def layer_rows(report: EvalReport, prefix=()):
    for l, v in enumerate(report.layer_loss):
        yield (*prefix, l, v)


def head_rows(report: EvalReport, prefix=()):
    L, H = report.head_loss.shape
    for l in range(L):
        for h in range(H):
            yield (*prefix, l, h, int(report.budgets[l, h]), report.head_loss[l, h])


def recall_rows(recall: dict, sigmas, prefix=()):
    for name, table in recall.items():
        L, H, _ = table.shape
        for l in range(L):
            for h in range(H):
                for i, s in enumerate(sigmas):
                    yield (*prefix, l, h, name, float(s), table[l, h, i])


def recall_summary_rows(recall: dict, importance: ImportanceTensor, sigmas, prefix=()):
    """Mean over heads and importance-mass-weighted mean, per metric and ratio."""
    mass = importance.head_mass()
    w = mass / mass.sum() if mass.sum() > 0 else np.full_like(mass, 1.0 / mass.size)
    for name, table in recall.items():
        for i, s in enumerate(sigmas):
            col = table[..., i]
            yield (*prefix, name, float(s), float(col.mean()), float((col * w).sum()))


def decomposition_rows(an: TraceAnalysis, budgets, prefix=()):
    """Per-head loss split into the oracle's own loss and the metric's optimality gap."""
    I = an.importance.values
    total = an.importance.head_mass()
    heur = total - retained_mass(an.importance, an.ranking, budgets)
    orac = total - retained_mass(an.importance, an.oracle, budgets)
    m_mask = an.ranking.prefix_mask(budgets)
    o_mask = an.oracle.prefix_mask(budgets)
    miss = np.where(o_mask & ~m_mask, I, 0.0).sum(axis=-1)
    fp = np.where(m_mask & ~o_mask, I, 0.0).sum(axis=-1)
    gap = miss - fp
    L, H = budgets.shape
    for l in range(L):
        for h in range(H):
            yield (*prefix, l, h, int(budgets[l, h]), heur[l, h], orac[l, h], gap[l, h])


def compare_rows(rows: list[CompareRow], prefix=()):
    for r in rows:
        yield (*prefix, r.sigma, r.B_total, r.greedy_relaxed, r.dp_convex, r.dp_raw, r.greedy_raw,
               r.raw_gap)


LAYER_HEADER = ("layer", "loss")
HEAD_HEADER = ("layer", "head", "budget", "loss")
RECALL_HEADER = ("layer", "head", "metric", "sigma", "recall")
RECALL_SUMMARY_HEADER = ("metric", "sigma", "mean_recall", "mass_weighted_recall")
DECOMP_HEADER = ("layer", "head", "budget", "heuristic_loss", "oracle_loss", "gap")
COMPARE_HEADER = ("sigma", "B_total", "greedy_relaxed", "dp_convex", "dp_raw", "greedy_raw", "raw_gap")


def write_eval_reports(out_dir, an: TraceAnalysis, report: EvalReport, sigmas=RECALL_SIGMAS) -> list[Path]:
    out = Path(out_dir)
    recall = report.recall or recall_curves(an, sigmas)
    return [
        write_csv(out / "layer_loss.csv", LAYER_HEADER, layer_rows(report)),
        write_csv(out / "head_loss.csv", HEAD_HEADER, head_rows(report)),
        write_csv(out / "recall.csv", RECALL_HEADER, recall_rows(recall, sigmas)),
        write_csv(out / "recall_summary.csv", RECALL_SUMMARY_HEADER,
                  recall_summary_rows(recall, an.importance, sigmas)),
        write_csv(out / "decomposition.csv", DECOMP_HEADER, decomposition_rows(an, report.budgets)),
    ]


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    shape: tuple = (4, 8, 128, 16, 16)  # L, H, T, K_max, d_h
    scenario: str = "misaligned"
    model_seed: int = 0
    calibration_seeds: list = field(default_factory=lambda: list(range(1000, 1030)))
    eval_seeds: list = field(default_factory=lambda: [42])
    metrics: list = field(default_factory=lambda: ["snapkv"])
    sigma_target: float = 0.8
    grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    allocators: list = field(default_factory=lambda: list(PIPELINE_ALLOCATORS))
    compare_sigmas: list = field(default_factory=lambda: [0.5, 0.8, 0.9])
    alpha: float = 0.20
    beta: float = 20.0
    exact_total: bool = True

    def validate(self) -> ModelShape:
        if not self.metrics:
            raise ConfigError("metric list is empty")
        if not self.eval_seeds:
            raise ConfigError("no evaluation seeds")
        if not self.calibration_seeds and "lukv" in self.allocators:
            raise ConfigError("the lukv allocator needs calibration seeds")
        bad = set(self.allocators) - set(PIPELINE_ALLOCATORS)
        if bad:
            raise ConfigError(f"unknown allocators {sorted(bad)}")
        if not 0.0 <= self.sigma_target <= 1.0:
            raise ConfigError("sigma_target must be in [0, 1]")
        try:
            return ModelShape(*self.shape)
        except TypeError as exc:
            raise ConfigError(f"bad shape {self.shape!r}") from exc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.shape = tuple(cfg.shape)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"unreadable config {path}: {exc}") from exc


def lukv_allocation(profile: Profile, an: TraceAnalysis, sigma: float, exact_total: bool) -> BudgetAllocation:
    """Budgets from a profile lookup; only the compression cap applies since
    evaluation scores plain ranked prefixes."""
    s = an.trace.shape
    sg = Safeguards(sink_size=0, recent_window=0, max_compression=profile.r_cap)
    target = an.budget_total(sigma)
    b = budget_from_ratios(lookup_ratios(profile, sigma), s.T, sg,
                           exact_total=target if exact_total else None)
    return BudgetAllocation(b, int(b.sum()), float("nan"), "lukv")


def run_pipeline(config: PipelineConfig, out_dir) -> dict:
    """Profile on calibration traces, allocate on evaluation traces, write every report.

    Returns ``{(seed, metric, allocator): total_loss}``. Raises
    :class:`InvariantViolation` if any consistency check fails.
    """
    shape = config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = [MetricSpec(m) for m in config.metrics]
    L, H, T = shape.L, shape.H, shape.T
    calib = [generate_synthetic_trace(shape, s, config.scenario, model_seed=config.model_seed)
             for s in config.calibration_seeds]

    profiles = {}
    if "lukv" in config.allocators:
        for spec in specs:
            prof = build_profile(calib, spec, config.grid)
            prof.save(out / f"profile_{spec.kind}.json")
            profiles[spec.kind] = prof

    totals = {}
    summary, layers, heads, recalls, rsum, decomp, comp = [], [], [], [], [], [], []
    for seed in config.eval_seeds:
        trace = generate_synthetic_trace(shape, seed, config.scenario, model_seed=config.model_seed)
        for spec in specs:
            an = TraceAnalysis.build(trace, spec)
            B = an.budget_total(config.sigma_target)
            for name in config.allocators:
                if name == "lukv":
                    alloc = lukv_allocation(profiles[spec.kind], an, config.sigma_target,
                                            config.exact_total)
                elif name == "lukv_insample":
                    alloc = greedy_allocate(an.gains, B, an.surrogate)
                    alloc.solver = "lukv_insample"
                else:
                    alloc = solve(an, name, B, config.alpha, config.beta)
                alloc.relaxed_objective, alloc.raw_objective = an.objectives(alloc.budgets)
                alloc.check(T)
                if name != "lukv" and alloc.B_total != B:
                    raise InvariantViolation(f"{name} spent {alloc.B_total} of {B} tokens")
                write_allocation(out / "allocations" / f"seed{seed}_{spec.kind}_{name}.json",
                                 alloc, spec.kind)
                report = evaluate_allocation(an, spec, alloc)
                totals[(seed, spec.kind, name)] = report.total_loss
                key = (seed, spec.kind, name)
                summary.append((*key, B, int(alloc.budgets.sum()), report.total_loss))
                layers.extend(layer_rows(report, key))
                heads.extend(head_rows(report, key))
                decomp.extend(decomposition_rows(an, alloc.budgets, key))
            rec = recall_curves(an, config.grid)
            recalls.extend(recall_rows(rec, config.grid, (seed,)))
            rsum.extend(recall_summary_rows(rec, an.importance, config.grid, (seed,)))
            if config.compare_sigmas:
                comp.extend(compare_rows(compare_solvers(an, spec, config.compare_sigmas),
                                         (seed, spec.kind)))
            log.info("seed %s metric %s done", seed, spec.kind)

    pre = ("seed", "metric", "allocator")
    write_csv(out / "summary.csv", pre + ("B_total", "budget_used", "total_loss"), summary)
    write_csv(out / "layer_loss.csv", pre + LAYER_HEADER, layers)
    write_csv(out / "head_loss.csv", pre + HEAD_HEADER, heads)
    write_csv(out / "decomposition.csv", pre + DECOMP_HEADER, decomp)
    write_csv(out / "recall.csv", ("seed",) + RECALL_HEADER, recalls)
    write_csv(out / "recall_summary.csv", ("seed",) + RECALL_SUMMARY_HEADER, rsum)
    if comp:
        write_csv(out / "compare.csv", ("seed", "metric") + COMPARE_HEADER, comp)
    cfg = asdict(config)
    cfg["shape"] = list(config.shape)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return totals
