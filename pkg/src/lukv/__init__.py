"""Head-level KV cache budget allocation driven by long-horizon oracle importance."""

from .errors import (
    ConfigError,
    InfeasibleBudgetError,
    InvalidCurveError,
    LukvError,
    TraceLoadError,
    ValidationError,
)
from .evaluate import EvalReport, PipelineConfig, compare_solvers, evaluate_allocation, run_pipeline
from .loss import decompose, eviction_loss, loss_curve, loss_curves, recall_curve, second_difference_witness
from .metrics import MetricSpec, compute_scores, keydiff_score, metric_ranking, snapkv_score
from .oracle import ImportanceTensor, Ranking, compute_oracle_importance, oracle_ranking
from .profile import (
    Profile,
    Safeguards,
    aggregate_profile,
    apply_eviction,
    budget_from_ratios,
    build_profile,
    lookup_ratios,
    solve_ratio_grid,
)
from .solver import (
    BudgetAllocation,
    baseline_allocate,
    brute_force_allocate,
    greedy_allocate,
    marginal_gains,
    mckp_dp_allocate,
    pava_convexify,
)
from .trace_model import HeadIndex, ModelShape, TraceBundle, generate_synthetic_trace, load_trace, save_trace

__version__ = "0.1.0"
