//! Filter sensitivity, rank instability and pruning plans.

mod plan;
mod sensitivity;

pub use plan::{
    plan_from_threshold, plan_impact, refine_plan, removal_order, PlanImpact, PlanOrigin,
    PruningPlan, Selection, ThresholdPlan,
};
pub use sensitivity::{
    build_profile, global_ranks, instability, normalize_per_layer, sensitivity_run, taylor_scores,
    FilterRecord, InstabilityKind, SensitivityConfig, SensitivityProfile, SensitivityRun,
};
