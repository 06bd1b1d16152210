//! Model-driven monitoring for IoT and cloud systems.
//!
//! Operators pick high-level goals from a quality model; the goals resolve
//! to metric leaves, the leaves are matched to probes from a catalog against
//! an architecture description, the probes are deployed and reconciled, and
//! the samples they push are rolled back up into per-goal health scores.
//! A seeded micro-grid simulator serves as a target system.

pub mod architecture;
pub mod catalog;
pub mod clock;
pub mod defaults;
pub mod deploy;
pub mod model;
pub mod pipeline;
pub mod runtime;
pub mod sim;

pub use architecture::{
    load_architecture, query_components, ArchitectureDescriptor, ComponentDescriptor,
    ComponentFilter, Layer,
};
pub use catalog::{
    load_catalog, match_probes, required_pairs, BindingKey, ExecutorKind, MatchError,
    ProbeBinding, ProbeDescriptor, ProbePlan,
};
pub use deploy::{apply_plan, diff_plans, supervise, DeploymentState, Executors, PlanDiff, ProbeStatus};
pub use model::{
    check_model_text, compute_scores, normalize_metric, parse_model, resolve_goals, validate_model, GoalSelection,
    MetricSet, QualityModel, ScoreReport, Status,
};
pub use pipeline::{compute_kpis, Sample, SeriesStore};
pub use runtime::{Runtime, RuntimeError, RuntimeOptions, SharedRuntime, View};
pub use sim::{start_sim, FaultKind, FaultSpec, SimConfig, SimHandle, Simulation};
