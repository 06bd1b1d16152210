//! Probe deployment: plan diffing, idempotent apply, and supervision.
//!
//! A [`DeploymentState`] is owned by a single reconciler. Executors perform
//! the side effects (registering a simulated probe, spawning a process);
//! everything else here is plain data manipulation.

mod process;
mod simulated;

pub use process::LocalProcessExecutor;
pub use simulated::{SimulatedExecutor, SimulatedOutput};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{BindingKey, ExecutorKind, ProbeBinding, ProbePlan};

pub const MAX_RETRIES: u32 = 3;
pub const RETRY_BACKOFF_MS: i64 = 5_000;
pub const DEFAULT_HEARTBEAT_TIMEOUT_SECONDS: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStatus {
    Pending,
    Running,
    Failed,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentEntry {
    pub status: ProbeStatus,
    pub started_at: i64,
    /// Present iff the entry is running.
    pub last_heartbeat: Option<i64>,
    pub binding: ProbeBinding,
    pub retries_left: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_at: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeploymentState {
    pub entries: BTreeMap<BindingKey, DeploymentEntry>,
}

impl DeploymentState {
    pub fn keys_with(&self, status: ProbeStatus) -> BTreeSet<BindingKey> {
        self.entries
            .iter()
            .filter(|(_, e)| e.status == status)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn running_keys(&self) -> BTreeSet<BindingKey> {
        self.keys_with(ProbeStatus::Running)
    }

    /// `(key, status)` pairs, the part of the state idempotence is judged on.
    pub fn statuses(&self) -> BTreeMap<BindingKey, ProbeStatus> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.status))
            .collect()
    }

    pub fn record_heartbeat(&mut self, key: &BindingKey, now: i64) {
        if let Some(e) = self.entries.get_mut(key) {
            if e.status == ProbeStatus::Running {
                e.last_heartbeat = Some(now);
            }
        }
    }

    /// Heartbeat every running probe at `component` that serves `metric`.
    pub fn record_sample(&mut self, component: &str, metric: &str, now: i64) {
        for (key, e) in self.entries.iter_mut() {
            if e.status == ProbeStatus::Running
                && key.component_id == component
                && e.binding.metrics_served.contains(metric)
            {
                e.last_heartbeat = Some(now);
            }
        }
    }

    pub fn view(&self) -> Vec<ProbeStatusView> {
        self.entries
            .iter()
            .map(|(k, e)| ProbeStatusView {
                probe_id: k.probe_id.clone(),
                component_id: k.component_id.clone(),
                status: e.status,
                executor: e.binding.executor,
                metrics: e.binding.metrics_served.iter().cloned().collect(),
                started_at: e.started_at,
                last_heartbeat: e.last_heartbeat,
                retries_left: e.retries_left,
                error: e.error.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStatusView {
    pub probe_id: String,
    pub component_id: String,
    pub status: ProbeStatus,
    pub executor: ExecutorKind,
    pub metrics: Vec<String>,
    pub started_at: i64,
    pub last_heartbeat: Option<i64>,
    pub retries_left: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDiff {
    pub to_start: Vec<ProbeBinding>,
    pub to_stop: Vec<BindingKey>,
    pub unchanged: Vec<BindingKey>,
}

/// Key-level difference between the live (non-stopped) entries of `current`
/// and `desired`. A binding whose content changed is both stopped and
/// started.
pub fn diff_plans(current: &DeploymentState, desired: &ProbePlan) -> PlanDiff {
    let live: BTreeMap<&BindingKey, &DeploymentEntry> = current
        .entries
        .iter()
        .filter(|(_, e)| e.status != ProbeStatus::Stopped)
        .collect();
    let mut diff = PlanDiff::default();
    let mut wanted = BTreeSet::new();
    for binding in &desired.bindings {
        let key = binding.key();
        match live.get(&key) {
            Some(entry) if entry.binding == *binding => diff.unchanged.push(key.clone()),
            Some(_) => {
                diff.to_stop.push(key.clone());
                diff.to_start.push(binding.clone());
            }
            None => diff.to_start.push(binding.clone()),
        }
        wanted.insert(key);
    }
    for key in live.keys() {
        if !wanted.contains(*key) {
            diff.to_stop.push((*key).clone());
        }
    }
    diff.to_stop.sort();
    diff
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LaunchError {
    #[error("{0}")]
    Failed(String),
}

/// Something that can run a probe binding on the target system.
pub trait ProbeExecutor: Send + Sync {
    /// Start (or restart) the probe for `binding`.
    fn launch(&self, binding: &ProbeBinding) -> Result<(), LaunchError>;
    fn stop(&self, key: &BindingKey);
}

#[derive(Clone, Default)]
pub struct Executors {
    map: BTreeMap<ExecutorKind, Arc<dyn ProbeExecutor>>,
}

impl Executors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, kind: ExecutorKind, executor: Arc<dyn ProbeExecutor>) -> &mut Self {
        self.map.insert(kind, executor);
        self
    }

    pub fn get(&self, kind: ExecutorKind) -> Option<&Arc<dyn ProbeExecutor>> {
        self.map.get(&kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeployError {
    #[error("no executor registered for `{0}`")]
    UnknownExecutor(ExecutorKind),
}

fn launch_entry(entry: &mut DeploymentEntry, executors: &Executors, now: i64) {
    let result = match executors.get(entry.binding.executor) {
        Some(ex) => ex.launch(&entry.binding),
        None => Err(LaunchError::Failed(format!(
            "no executor for {}",
            entry.binding.executor
        ))),
    };
    match result {
        Ok(()) => {
            entry.status = ProbeStatus::Running;
            entry.started_at = now;
            entry.last_heartbeat = Some(now);
            entry.failed_at = None;
            entry.error = None;
        }
        Err(e) => {
            tracing::warn!(probe = %entry.binding.key(), error = %e, "probe launch failed");
            entry.status = ProbeStatus::Failed;
            entry.last_heartbeat = None;
            entry.failed_at = Some(now);
            entry.error = Some(e.to_string());
        }
    }
}

/// Reconcile `state` towards `plan`. Launch failures are recorded on the
/// entry; they do not abort the remaining work.
pub fn apply_plan(
    state: &DeploymentState,
    plan: &ProbePlan,
    executors: &Executors,
    now: i64,
) -> Result<DeploymentState, DeployError> {
    if let Some(b) = plan
        .bindings
        .iter()
        .find(|b| executors.get(b.executor).is_none())
    {
        return Err(DeployError::UnknownExecutor(b.executor));
    }

    let diff = diff_plans(state, plan);
    let mut next = state.clone();

    for key in &diff.to_stop {
        if let Some(entry) = next.entries.get_mut(key) {
            if let Some(ex) = executors.get(entry.binding.executor) {
                ex.stop(key);
            }
            entry.status = ProbeStatus::Stopped;
            entry.last_heartbeat = None;
        }
    }

    for binding in diff.to_start {
        let mut entry = DeploymentEntry {
            status: ProbeStatus::Pending,
            started_at: now,
            last_heartbeat: None,
            binding,
            retries_left: MAX_RETRIES,
            failed_at: None,
            error: None,
        };
        launch_entry(&mut entry, executors, now);
        next.entries.insert(entry.binding.key(), entry);
    }

    launch_pending(&mut next, executors, now);
    Ok(next)
}

/// Launch every pending entry.
pub fn launch_pending(state: &mut DeploymentState, executors: &Executors, now: i64) {
    for entry in state.entries.values_mut() {
        if entry.status == ProbeStatus::Pending {
            launch_entry(entry, executors, now);
        }
    }
}

/// Fail running entries whose heartbeat is older than the timeout, and move
/// failed entries with retries left back to pending once the backoff passed.
pub fn supervise(state: &DeploymentState, now: i64, heartbeat_timeout_seconds: u64) -> DeploymentState {
    let timeout_ms = (heartbeat_timeout_seconds.max(1) * 1000) as i64;
    let mut next = state.clone();
    for entry in next.entries.values_mut() {
        match entry.status {
            ProbeStatus::Running => {
                let last = entry.last_heartbeat.unwrap_or(entry.started_at);
                if now - last > timeout_ms {
                    entry.status = ProbeStatus::Failed;
                    entry.last_heartbeat = None;
                    entry.failed_at = Some(now);
                    entry.error = Some("heartbeat timeout".into());
                }
            }
            ProbeStatus::Failed => {
                let since = entry.failed_at.unwrap_or(now);
                if entry.retries_left > 0 && now - since >= RETRY_BACKOFF_MS {
                    entry.retries_left -= 1;
                    entry.status = ProbeStatus::Pending;
                }
            }
            ProbeStatus::Pending | ProbeStatus::Stopped => {}
        }
    }
    next
}
