//! The orchestrator state behind the HTTP service.
//!
//! Configure stores a goal selection, Deploy resolves it to a probe plan and
//! reconciles running probes towards it, Operate reads scores out of the
//! series store. All mutations go through `&mut Runtime`; the service wraps
//! it in a [`SharedRuntime`] so they are serialised.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Weak};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architecture::ArchitectureDescriptor;
use crate::catalog::{match_probes, ExecutorKind, MatchError, ProbeBinding, ProbeDescriptor, ProbePlan};
use crate::clock::{Clock, SystemClock};
use crate::deploy::{
    apply_plan, diff_plans, launch_pending, supervise, DeployError, DeploymentState, Executors,
    LocalProcessExecutor, ProbeStatus, ProbeStatusView, SimulatedExecutor,
    DEFAULT_HEARTBEAT_TIMEOUT_SECONDS,
};
use crate::model::{
    resolve_goals, Combinator, GoalSelection, NodeKind, QualityModel, ScoreReport, SelectionError,
};
use crate::pipeline::{
    compute_kpis, parse_ndjson, IngestSummary, RejectReason, Sample, SampleLog, SeriesStore,
    DEFAULT_RETENTION_SECONDS,
};
use crate::sim::{
    roster_from_architecture, start_sim_with_listener, FaultId, FaultKind, FaultSpec, SimConfig,
    SimError, SimHandle, SimSnapshot,
};

pub type SharedRuntime = Arc<Mutex<Runtime>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Manager,
    #[default]
    Technician,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("unknown goal `{0}`")]
    UnknownGoal(String),
    #[error("no goals selected")]
    EmptySelection,
    #[error("no probe can measure: {}", .0.join(", "))]
    UncoveredMetrics(Vec<String>),
    #[error("{0}")]
    Plan(String),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error("simulator is not enabled")]
    SimDisabled,
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
    #[error("invalid simulator config: {0}")]
    Sim(String),
}

impl From<SelectionError> for RuntimeError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::UnknownGoal(id) => RuntimeError::UnknownGoal(id),
        }
    }
}

impl From<MatchError> for RuntimeError {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::UncoveredMetrics(m) => RuntimeError::UncoveredMetrics(m),
            other => RuntimeError::Plan(other.to_string()),
        }
    }
}

impl From<SimError> for RuntimeError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::UnknownComponent(c) => RuntimeError::UnknownComponent(c),
            SimError::InvalidFault(m) => RuntimeError::InvalidFault(m),
            other => RuntimeError::Sim(other.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    pub retention_seconds: u64,
    pub heartbeat_timeout_seconds: u64,
    /// Handed to `local_process` probes as `INGEST_URL`.
    pub ingest_url: String,
    /// Path substituted for the `cloudhealth` program name in probe commands.
    pub self_exe: Option<PathBuf>,
    pub sample_log: Option<PathBuf>,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            retention_seconds: DEFAULT_RETENTION_SECONDS,
            heartbeat_timeout_seconds: DEFAULT_HEARTBEAT_TIMEOUT_SECONDS,
            ingest_url: "http://127.0.0.1:8080/ingest".into(),
            self_exe: None,
            sample_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedBinding {
    pub probe_id: String,
    pub component_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploySummary {
    pub bindings: Vec<ProbeBinding>,
    pub started: usize,
    pub stopped: usize,
    pub unchanged: usize,
    pub failed: Vec<FailedBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalView {
    pub id: String,
    pub name: String,
    pub children: Vec<String>,
    pub weights: Vec<f64>,
    pub combinator: Combinator,
    pub root: bool,
}

/// Body of `POST /sim/faults`. `start_tick` defaults to the next tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRequest {
    pub kind: FaultKind,
    pub component_id: String,
    #[serde(default)]
    pub start_tick: Option<u64>,
    pub duration_ticks: u64,
    #[serde(default)]
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultAccepted {
    pub fault_id: FaultId,
    pub start_tick: u64,
    pub end_tick: u64,
    pub start_ms: i64,
    pub end_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStatus {
    pub tick: u64,
    pub now_ms: i64,
    pub start_ms: i64,
    pub tick_ms: u64,
    pub seed: u64,
    pub speedup: f64,
    pub faults: Vec<(FaultId, FaultSpec)>,
}

struct SimClock(Arc<SimHandle>);

impl Clock for SimClock {
    fn now_ms(&self) -> i64 {
        self.0.now_ms()
    }
}

pub struct Runtime {
    model: QualityModel,
    architecture: ArchitectureDescriptor,
    catalog: Vec<ProbeDescriptor>,
    selection: GoalSelection,
    plan: Option<ProbePlan>,
    deployment: DeploymentState,
    store: SeriesStore,
    executors: Executors,
    simulated: Arc<SimulatedExecutor>,
    local: Arc<LocalProcessExecutor>,
    sim: Option<Arc<SimHandle>>,
    clock: Arc<dyn Clock>,
    heartbeat_timeout_seconds: u64,
    sample_log: Option<SampleLog>,
}

impl Runtime {
    pub fn new(
        model: QualityModel,
        architecture: ArchitectureDescriptor,
        catalog: Vec<ProbeDescriptor>,
        options: RuntimeOptions,
    ) -> std::io::Result<Self> {
        let store = SeriesStore::new(
            options.retention_seconds,
            model.metrics.keys().cloned(),
            architecture.component_ids(),
        );
        let mut local = LocalProcessExecutor::new(&catalog, options.ingest_url.clone());
        if let Some(exe) = &options.self_exe {
            local = local.with_alias("cloudhealth", exe);
        }
        let local = Arc::new(local);
        let simulated = Arc::new(SimulatedExecutor::disabled());
        let mut executors = Executors::new();
        executors
            .register(ExecutorKind::Simulated, simulated.clone())
            .register(ExecutorKind::LocalProcess, local.clone());
        let sample_log = options
            .sample_log
            .as_deref()
            .map(SampleLog::create)
            .transpose()?;
        Ok(Self {
            model,
            architecture,
            catalog,
            selection: GoalSelection::default(),
            plan: None,
            deployment: DeploymentState::default(),
            store,
            executors,
            simulated,
            local,
            sim: None,
            clock: Arc::new(SystemClock),
            heartbeat_timeout_seconds: options.heartbeat_timeout_seconds.max(1),
            sample_log,
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn shared(self) -> SharedRuntime {
        Arc::new(Mutex::new(self))
    }

    /// Route simulated probes to the given simulated components. Used when
    /// the caller steps a [`crate::sim::Simulation`] by hand.
    pub fn enable_simulated_probes(&mut self, components: impl IntoIterator<Item = String>) {
        self.simulated = Arc::new(SimulatedExecutor::new(components));
        self.executors
            .register(ExecutorKind::Simulated, self.simulated.clone());
    }

    pub fn now_ms(&self) -> i64 {
        self.clock.now_ms()
    }

    pub fn model(&self) -> &QualityModel {
        &self.model
    }

    pub fn architecture(&self) -> &ArchitectureDescriptor {
        &self.architecture
    }

    pub fn catalog(&self) -> &[ProbeDescriptor] {
        &self.catalog
    }

    pub fn selection(&self) -> &GoalSelection {
        &self.selection
    }

    pub fn plan(&self) -> Option<&ProbePlan> {
        self.plan.as_ref()
    }

    pub fn deployment(&self) -> &DeploymentState {
        &self.deployment
    }

    pub fn store(&self) -> &SeriesStore {
        &self.store
    }

    pub fn goals(&self) -> Vec<GoalView> {
        self.model
            .goals
            .values()
            .map(|g| GoalView {
                id: g.id.clone(),
                name: g.name.clone(),
                children: g.children.clone(),
                weights: g.weights.clone(),
                combinator: g.combinator,
                root: self.model.roots.contains(&g.id),
            })
            .collect()
    }

    /// Replace the selection. Running probes are untouched until the next
    /// deploy.
    pub fn configure_selection<S: AsRef<str>>(
        &mut self,
        goal_ids: &[S],
    ) -> Result<&GoalSelection, RuntimeError> {
        let selection = GoalSelection::new(goal_ids.iter().map(|s| s.as_ref().to_string()));
        selection.check(&self.model)?;
        self.selection = selection;
        Ok(&self.selection)
    }

    /// Resolve the selection, match probes and reconcile the deployment.
    pub fn trigger_deploy(&mut self) -> Result<DeploySummary, RuntimeError> {
        if self.selection.is_empty() {
            return Err(RuntimeError::EmptySelection);
        }
        let metrics = resolve_goals(&self.model, &self.selection)?;
        let plan = match_probes(&metrics, &self.architecture, &self.catalog)?;
        let now = self.now_ms();
        let diff = diff_plans(&self.deployment, &plan);
        let next = apply_plan(&self.deployment, &plan, &self.executors, now)?;

        let failed = plan
            .bindings
            .iter()
            .filter_map(|b| {
                let e = next.entries.get(&b.key())?;
                (e.status == ProbeStatus::Failed).then(|| FailedBinding {
                    probe_id: b.probe_id.clone(),
                    component_id: b.component_id.clone(),
                    error: e.error.clone().unwrap_or_default(),
                })
            })
            .collect();
        let summary = DeploySummary {
            bindings: plan.bindings.clone(),
            started: diff.to_start.len(),
            stopped: diff.to_stop.len(),
            unchanged: diff.unchanged.len(),
            failed,
        };
        tracing::info!(
            started = summary.started,
            stopped = summary.stopped,
            unchanged = summary.unchanged,
            "deployment reconciled"
        );
        self.deployment = next;
        self.plan = Some(plan);
        Ok(summary)
    }

    /// Scores for the current selection, or every root while nothing is
    /// selected.
    pub fn kpis(&self, view: View) -> ScoreReport {
        let now = self.now_ms();
        let selection = if self.selection.is_empty() {
            GoalSelection::new(self.model.roots.iter().cloned())
        } else {
            self.selection.clone()
        };
        let mut report = compute_kpis(&self.store, &self.model, &selection, now)
            .expect("selection is validated on configure");
        match view {
            View::Technician => {
                for (id, node) in report.nodes.iter_mut() {
                    if node.kind == NodeKind::Metric {
                        node.components = self.store.metric_breakdown(&self.model, id, now).ok();
                    }
                }
            }
            View::Manager => {
                report.nodes.retain(|_, n| n.kind == NodeKind::Goal);
                for n in report.nodes.values_mut() {
                    n.raw = None;
                    n.components = None;
                }
            }
        }
        report
    }

    pub fn probes(&self) -> Vec<ProbeStatusView> {
        self.deployment.view()
    }

    pub fn series(
        &self,
        metric: &str,
        component: &str,
        from: Option<i64>,
        to: Option<i64>,
    ) -> Result<Vec<Sample>, RuntimeError> {
        if !self.store.knows_metric(metric) {
            return Err(RuntimeError::UnknownMetric(metric.to_string()));
        }
        if !self.store.knows_component(component) {
            return Err(RuntimeError::UnknownComponent(component.to_string()));
        }
        let now = self.now_ms();
        let from = from.unwrap_or(now - self.store.retention_ms());
        let to = to.unwrap_or(now);
        Ok(self.store.query(metric, component, from, to))
    }

    pub fn ingest(&mut self, samples: impl IntoIterator<Item = Sample>) -> IngestSummary {
        let now = self.now_ms();
        self.ingest_at(samples, now)
    }

    fn ingest_at(&mut self, samples: impl IntoIterator<Item = Sample>, now: i64) -> IngestSummary {
        let mut summary = IngestSummary::default();
        for sample in samples {
            match self.store.ingest_sample(&sample, now) {
                Ok(()) => {
                    summary.accepted += 1;
                    self.deployment
                        .record_sample(&sample.component, &sample.metric, now);
                    if let Some(log) = self.sample_log.as_mut() {
                        if let Err(e) = log.append(&sample) {
                            tracing::warn!(error = %e, "sample log write failed");
                        }
                    }
                }
                Err(_) => summary.rejected += 1,
            }
        }
        if let Some(log) = self.sample_log.as_mut() {
            let _ = log.flush();
        }
        summary
    }

    /// Ingest a newline-delimited JSON body. Malformed lines count as rejected.
    pub fn ingest_body(&mut self, body: &str) -> IngestSummary {
        let mut samples = Vec::new();
        let mut malformed = 0;
        for line in parse_ndjson(body) {
            match line {
                Ok(s) => samples.push(s),
                Err(_) => {
                    malformed += 1;
                    self.store.count_rejection(RejectReason::Malformed);
                }
            }
        }
        let mut summary = self.ingest(samples);
        summary.rejected += malformed;
        summary
    }

    pub fn rejections(&self) -> &BTreeMap<RejectReason, u64> {
        self.store.rejections()
    }

    /// Supervise probes: fail stale or exited ones, retry after backoff.
    pub fn maintain(&mut self, now: i64) {
        for key in self.local.exited() {
            if let Some(e) = self.deployment.entries.get_mut(&key) {
                if e.status == ProbeStatus::Running {
                    e.status = ProbeStatus::Failed;
                    e.last_heartbeat = None;
                    e.failed_at = Some(now);
                    e.error = Some("probe process exited".into());
                }
            }
        }
        let mut next = supervise(&self.deployment, now, self.heartbeat_timeout_seconds);
        launch_pending(&mut next, &self.executors, now);
        self.deployment = next;
    }

    /// Run due simulated probes against `snapshot`, ingest what they report
    /// and supervise the deployment at the snapshot's time.
    pub fn on_tick(&mut self, snapshot: &SimSnapshot) {
        let now = snapshot.now_ms;
        let out = self.simulated.collect(snapshot);
        for key in &out.heartbeats {
            self.deployment.record_heartbeat(key, now);
        }
        self.ingest_at(out.samples, now);
        self.store.evict(now);
        self.maintain(now);
    }

    pub fn sim_status(&self) -> Option<SimStatus> {
        let sim = self.sim.as_ref()?;
        let config = sim.config();
        let snapshot = sim.snapshot();
        Some(SimStatus {
            tick: snapshot.tick,
            now_ms: snapshot.now_ms,
            start_ms: config.start_ms,
            tick_ms: config.tick_ms,
            seed: config.seed,
            speedup: config.speedup,
            faults: sim.faults(),
        })
    }

    pub fn inject_fault(&self, request: FaultRequest) -> Result<FaultAccepted, RuntimeError> {
        let sim = self.sim.as_ref().ok_or(RuntimeError::SimDisabled)?;
        let config = sim.config();
        let start_tick = request.start_tick.unwrap_or_else(|| sim.tick() + 1);
        let spec = FaultSpec {
            kind: request.kind,
            component_id: request.component_id,
            start_tick,
            duration_ticks: request.duration_ticks,
            magnitude: request.magnitude,
        };
        let end_tick = spec.end_tick();
        let fault_id = sim.inject_fault(spec)?;
        let to_ms = |tick: u64| config.start_ms + (tick * config.tick_ms) as i64;
        Ok(FaultAccepted {
            fault_id,
            start_tick,
            end_tick,
            start_ms: to_ms(start_tick),
            end_ms: to_ms(end_tick),
        })
    }

    pub fn sim_enabled(&self) -> bool {
        self.sim.is_some()
    }

    /// Stop every probe and the simulator.
    pub fn shutdown(&mut self) {
        // The tick thread may be waiting on this runtime's lock; joining
        // it here would deadlock.
        if let Some(sim) = self.sim.as_ref() {
            sim.request_stop();
        }
        let empty = ProbePlan::default();
        if let Ok(next) = apply_plan(&self.deployment, &empty, &self.executors, self.now_ms()) {
            self.deployment = next;
        }
    }
}

/// Start a real-time simulator mirroring the runtime's architecture and let
/// its ticks drive simulated probes. The runtime clock becomes simulation
/// time.
pub fn start_simulation(
    shared: &SharedRuntime,
    mut config: SimConfig,
    initial_faults: Vec<FaultSpec>,
) -> Result<Arc<SimHandle>, RuntimeError> {
    let components = {
        let rt = shared.lock();
        roster_from_architecture(&rt.architecture)
    };
    config.components = components.clone();

    let weak: Weak<Mutex<Runtime>> = Arc::downgrade(shared);
    let listener = Box::new(move |snapshot: &SimSnapshot| {
        if let Some(rt) = weak.upgrade() {
            rt.lock().on_tick(snapshot);
        }
    });

    // Hold the runtime lock while wiring so no tick lands before the
    // simulated executor and clock are in place.
    let mut rt = shared.lock();
    let handle = Arc::new(start_sim_with_listener(config, Some(listener))?);
    for fault in initial_faults {
        handle.inject_fault(fault)?;
    }
    rt.enable_simulated_probes(components.into_iter().map(|c| c.id));
    rt.clock = Arc::new(SimClock(handle.clone()));
    rt.sim = Some(handle.clone());
    Ok(handle)
}
