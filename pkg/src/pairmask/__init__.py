"""pairmask: pairwise-canceling Gaussian masks for differentially private
federated averaging, with a worst-case privacy auditor, an optimal noise
planner, and a straggler-aware training simulator."""

__version__ = "0.1.0"

from .params import DPBudget, NoisePlan, StragglerDistribution, ThreatModel
from .noise import (
    as_master_seed,
    derive_client_seed,
    derive_pair_seed,
    derive_seed,
    gaussian_block,
    gaussian_vector,
    individual_noise,
    master_seed_from_int,
    pairwise_noise,
)
from .masking import (
    AggregationError,
    aggregate,
    global_noise_variance,
    local_disturbance_variance,
    mask_update,
    residual_disturbance_variance,
)
from .audit import (
    AuditReport,
    DisturbanceCovariance,
    RealizationCounts,
    SingularCovarianceError,
    TailCheckResult,
    analytic_tail,
    audit_by_subsets,
    compose_over_rounds,
    covariance_from_counts,
    covariance_from_sets,
    dp_condition_holds,
    loss_statistics,
    monte_carlo_tail_check,
    privacy_loss_moments,
    worst_case_audit,
)
from .planner import (
    BASELINE_SCHEMES,
    PlannerInfeasibleError,
    PlanSolution,
    QuarticSpec,
    SMPC_DP_WORSTCASE,
    VANILLA_LDP,
    baseline_variances,
    constraint_lhs,
    expected_aggregate_noise,
    expected_straggler_ratio,
    optimal_variances,
    quartic_coefficients,
    solve_variance_ratio,
)
from .sim import (
    BoundResult,
    RoundTrace,
    SyntheticTask,
    TrainingConfig,
    TrainingDivergedError,
    TrainingTrace,
    build_mask_cache,
    clip_delta,
    convergence_bound,
    expected_noise_norms,
    gradient_ratio_bound,
    lipschitz_bound,
    local_sgd,
    make_logistic_task,
    make_quadratic_task,
    reference_trajectory,
    run_round,
    run_training,
    sample_straggler_set,
    trace_to_csv,
    training_summary,
)
