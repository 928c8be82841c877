"""Command line entry point: ``lukv <subcommand>``.

Exit codes: 0 ok, 2 configuration error, 3 validation error, 4 infeasible budget.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from .errors import ConfigError, LukvError
from .evaluate import (
    COMPARE_HEADER,
    PipelineConfig,
    TraceAnalysis,
    compare_rows,
    compare_solvers,
    evaluate_allocation,
    read_allocation,
    run_pipeline,
    solve as run_solver,
    write_allocation,
    write_csv,
    write_eval_reports,
)
from .loss import floor_tokens
from .metrics import METRIC_KINDS, MetricSpec
from .profile import DEFAULT_GRID, Profile, Safeguards, budget_from_ratios, build_profile, lookup_ratios
from .trace_model import SCENARIOS, ModelShape, generate_synthetic_trace, load_trace, save_trace

SOLVERS = ("greedy", "dp", "dp_convex", "brute", "uniform", "pyramid", "adaptive")


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except LukvError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _metric(name: str, window, kernel) -> MetricSpec:
    kw = {}
    if window is not None:
        kw["window_size"] = window
    if kernel is not None:
        kw["kernel_size"] = kernel
    return MetricSpec(name, **kw)


metric_option = click.option("--metric", type=click.Choice(METRIC_KINDS), default="snapkv", show_default=True)
window_option = click.option("--window", type=int, default=None, help="Observation/recent window size.")
kernel_option = click.option("--kernel", type=int, default=None, help="SnapKV pooling kernel (odd).")


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Head-level KV cache budget allocation from long-horizon oracle importance."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--shape", required=True, help="L,H,T,K_max[,d_h]")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scenario", type=click.Choice(SCENARIOS), default="mixed", show_default=True)
@click.option("--window-rows", type=int, default=None, help="Observation rows to store (default min(32, T)).")
@click.option("--model-seed", type=int, default=0, show_default=True)
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
def gen(shape, seed, scenario, window_rows, model_seed, out):
    """Generate a synthetic trace directory."""
    try:
        dims = [int(x) for x in shape.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --shape {shape!r}") from exc
    if len(dims) == 4:
        dims.append(16)
    if len(dims) != 5:
        raise ConfigError("--shape takes L,H,T,K_max[,d_h]")
    bundle = generate_synthetic_trace(ModelShape(*dims), seed, scenario, window=window_rows,
                                      model_seed=model_seed)
    click.echo(save_trace(bundle, out))


@main.command()
@click.option("--trace", "trace_dir", required=True, type=click.Path(exists=True, file_okay=False))
@metric_option
@window_option
@kernel_option
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def score(trace_dir, metric, window, kernel, out):
    """Write per-token metric scores and ranks as CSV."""
    an = TraceAnalysis.build(load_trace(trace_dir), _metric(metric, window, kernel))
    L, H, T = an.scores.shape
    ranks = np.empty_like(an.ranking.order)
    np.put_along_axis(ranks, an.ranking.order, np.arange(T), axis=-1)
    rows = ((l, h, j, an.scores[l, h, j], int(ranks[l, h, j]))
            for l in range(L) for h in range(H) for j in range(T))
    click.echo(write_csv(out, ("layer", "head", "position", "score", "rank"), rows))


@main.command()
@click.option("--trace", "trace_dir", required=True, type=click.Path(exists=True, file_okay=False))
@metric_option
@window_option
@kernel_option
@click.option("--sigma", type=float, default=None, help="Global compression ratio.")
@click.option("--budget", type=int, default=None, help="Global token budget B_total.")
@click.option("--solver", type=click.Choice(SOLVERS), default="greedy", show_default=True)
@click.option("--alpha", type=float, default=None, help="Adaptive safeguard fraction (default 0.2).")
@click.option("--beta", type=float, default=None, help="Pyramid ramp factor (default 20).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def solve(trace_dir, metric, window, kernel, sigma, budget, solver, alpha, beta, out):
    """Allocate a global budget across heads and write allocation.json."""
    if (sigma is None) == (budget is None):
        raise ConfigError("give exactly one of --sigma or --budget")
    spec = _metric(metric, window, kernel)
    an = TraceAnalysis.build(load_trace(trace_dir), spec)
    B = an.budget_total(sigma) if sigma is not None else budget
    alloc = run_solver(an, solver, B, alpha, beta)
    write_allocation(out, alloc, spec.kind)
    click.echo(f"{solver}: B_total={alloc.B_total} relaxed={alloc.relaxed_objective!r} "
               f"raw={alloc.raw_objective!r}")


@main.group(cls=_Group)
def profile():
    """Build or apply offline compression profiles."""


@profile.command("build")
@click.option("--traces", multiple=True, type=click.Path(exists=True, file_okay=False))
@click.argument("more", nargs=-1, type=click.Path(exists=True, file_okay=False))
@metric_option
@window_option
@kernel_option
@click.option("--grid", default=",".join(str(x) for x in DEFAULT_GRID), show_default=True)
@click.option("--r-cap", type=float, default=0.99, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def profile_build(traces, more, metric, window, kernel, grid, r_cap, out):
    """Solve every calibration trace over the grid and average into profile.json."""
    dirs = list(traces) + list(more)
    if not dirs:
        raise ConfigError("no calibration traces given")
    spec = _metric(metric, window, kernel)
    prof = build_profile([load_trace(d) for d in dirs], spec, _floats(grid), r_cap)
    click.echo(prof.save(out))


@profile.command("apply")
@click.option("--profile", "profile_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--sigma", type=float, required=True)
@click.option("--tokens", type=int, required=True, help="Prefill length T.")
@click.option("--sink", type=int, default=None)
@click.option("--window", type=int, default=None)
@click.option("--max-compression", type=float, default=None)
@click.option("--exact-total", is_flag=True, help="Hand the floor shortfall back out by largest fraction.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def profile_apply(profile_path, sigma, tokens, sink, window, max_compression, exact_total, out):
    """Turn a profile lookup into per-head integer budgets."""
    prof = Profile.load(profile_path)
    sg = prof.safeguards
    sg = Safeguards(sg.sink_size if sink is None else sink,
                    sg.recent_window if window is None else window,
                    sg.max_compression if max_compression is None else max_compression)
    ratios = lookup_ratios(prof, sigma)
    target = floor_tokens((1.0 - sigma) * prof.L * prof.H * tokens) if exact_total else None
    b = budget_from_ratios(ratios, tokens, sg, exact_total=target)
    doc = {"schema_version": 1, "metric": prof.metric, "sigma": sigma, "T": tokens,
           "safeguards": sg.as_dict(), "ratios": ratios.tolist(), "budgets": b.tolist(),
           "total": int(b.sum())}
    Path(out).write_text(json.dumps(doc, indent=1) + "\n")
    click.echo(f"{out}: total budget {int(b.sum())} of {prof.L * prof.H * tokens}")


@main.command("eval")
@click.option("--trace", "trace_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--allocation", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--metric", type=click.Choice(METRIC_KINDS), default=None,
              help="Override the metric recorded in the allocation file.")
@window_option
@kernel_option
@click.option("--out", required=True, type=click.Path(file_okay=False))
def eval_cmd(trace_dir, allocation, metric, window, kernel, out):
    """Loss reports for an allocation: layer, head, recall and decomposition CSVs."""
    alloc, recorded = read_allocation(allocation)
    an = TraceAnalysis.build(load_trace(trace_dir), _metric(metric or recorded, window, kernel))
    report = evaluate_allocation(an, an.metric, alloc)
    for p in write_eval_reports(out, an, report):
        click.echo(p)
    click.echo(f"total oracle eviction loss {report.total_loss!r}")


@main.command()
@click.option("--trace", "trace_dir", required=True, type=click.Path(exists=True, file_okay=False))
@metric_option
@window_option
@kernel_option
@click.option("--sigmas", default="0.5,0.8,0.9", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def compare(trace_dir, metric, window, kernel, sigmas, out):
    """Greedy on convexified curves against exact DP; writes compare.csv."""
    an = TraceAnalysis.build(load_trace(trace_dir), _metric(metric, window, kernel))
    rows = compare_solvers(an, an.metric, _floats(sigmas))
    path = write_csv(Path(out) / "compare.csv", COMPARE_HEADER, compare_rows(rows))
    for r in rows:
        click.echo(f"sigma={r.sigma} greedy_relaxed={r.greedy_relaxed:.6g} dp_convex={r.dp_convex:.6g} "
                   f"dp_raw={r.dp_raw:.6g} greedy_raw={r.greedy_raw:.6g} gap={r.raw_gap:.3g}")
    click.echo(path)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Single evaluation seed (overrides config).")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def run(config_path, seed, out):
    """Run the whole pipeline: profile, allocate, evaluate, compare."""
    cfg = PipelineConfig.load(config_path) if config_path else PipelineConfig()
    if seed is not None:
        cfg.eval_seeds = [seed]
    totals = run_pipeline(cfg, out)
    for (s, m, a), v in sorted(totals.items()):
        click.echo(f"seed={s} metric={m} allocator={a} total_loss={v:.6g}")


@main.command()
@click.option("--only", multiple=True, help="Run only these checks (e.g. C1).")
def selftest(only):
    """Run the invariant suite; exit 3 if any check fails."""
    from .selftest import run_selftest

    t0 = time.perf_counter()
    results = run_selftest(set(only) or None, echo=click.echo)
    click.echo(f"{sum(r.ok for r in results)}/{len(results)} checks passed in "
               f"{time.perf_counter() - t0:.1f}s")
    if not all(r.ok for r in results):
        sys.exit(3)


if __name__ == "__main__":
    main()
