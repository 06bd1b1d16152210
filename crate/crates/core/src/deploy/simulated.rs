use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;

use super::{LaunchError, ProbeExecutor};
use crate::catalog::{BindingKey, ProbeBinding};
use crate::pipeline::Sample;
use crate::sim::{Observation, SimSnapshot, BASELINE_RATE_RPS};

/// Metrics a simulated probe knows how to derive from simulator signals.
pub const SIMULATED_METRICS: [&str; 6] = [
    "uptime_ratio",
    "mtr_seconds",
    "failed_request_ratio",
    "latency_ms",
    "response_time_ms",
    "throughput_rps",
];

#[derive(Debug, Clone)]
struct SimProbe {
    binding: ProbeBinding,
    next_due: Option<i64>,
    outage_since: Option<i64>,
}

/// Runs probes in-process against simulator snapshots. Probes are registered
/// by `launch` and polled by the simulation driver through [`collect`].
///
/// [`collect`]: SimulatedExecutor::collect
#[derive(Debug)]
pub struct SimulatedExecutor {
    components: Option<BTreeSet<String>>,
    probes: Mutex<BTreeMap<BindingKey, SimProbe>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulatedOutput {
    pub samples: Vec<Sample>,
    /// Probes that ran this round, whether or not they produced samples.
    pub heartbeats: Vec<BindingKey>,
}

impl SimulatedExecutor {
    /// An executor for the given simulated components.
    pub fn new(components: impl IntoIterator<Item = String>) -> Self {
        Self {
            components: Some(components.into_iter().collect()),
            probes: Mutex::new(BTreeMap::new()),
        }
    }

    /// An executor with no simulator behind it; every launch fails.
    pub fn disabled() -> Self {
        Self {
            components: None,
            probes: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn active(&self) -> Vec<BindingKey> {
        self.probes.lock().keys().cloned().collect()
    }

    /// Run every probe that is due at `snapshot.now_ms`.
    pub fn collect(&self, snapshot: &SimSnapshot) -> SimulatedOutput {
        let now = snapshot.now_ms;
        let mut out = SimulatedOutput::default();
        let mut probes = self.probes.lock();
        for (key, probe) in probes.iter_mut() {
            let Some(obs) = snapshot.components.get(&key.component_id) else {
                continue;
            };
            // Outage tracking follows every tick, not only due rounds.
            if obs.is_up() {
                probe.outage_since = None;
            } else if probe.outage_since.is_none() {
                probe.outage_since = Some(now);
            }
            if probe.next_due.is_some_and(|due| now < due) {
                continue;
            }
            probe.next_due = Some(now + (probe.binding.interval_seconds * 1000) as i64);
            for metric in &probe.binding.metrics_served {
                if let Some(value) = measure(metric, obs, probe.outage_since, now) {
                    out.samples
                        .push(Sample::new(metric.clone(), key.component_id.clone(), now, value));
                }
            }
            out.heartbeats.push(key.clone());
        }
        out
    }
}

fn measure(metric: &str, obs: &Observation, outage_since: Option<i64>, now: i64) -> Option<f64> {
    let up = obs.is_up();
    match metric {
        "uptime_ratio" => Some(obs.up),
        "mtr_seconds" => Some(outage_since.map_or(0.0, |t| (now - t) as f64 / 1000.0)),
        // An unreachable service yields no request-level data.
        "latency_ms" | "response_time_ms" => obs.request_latency_ms.filter(|_| up),
        "throughput_rps" => obs.served_requests_per_s.filter(|_| up),
        "failed_request_ratio" => obs
            .served_requests_per_s
            .filter(|_| up)
            .map(|served| (1.0 - served / BASELINE_RATE_RPS).clamp(0.0, 1.0)),
        _ => None,
    }
}

impl ProbeExecutor for SimulatedExecutor {
    fn launch(&self, binding: &ProbeBinding) -> Result<(), LaunchError> {
        let Some(components) = &self.components else {
            return Err(LaunchError::Failed("simulator is not running".into()));
        };
        if !components.contains(&binding.component_id) {
            return Err(LaunchError::Failed(format!(
                "component `{}` is not simulated",
                binding.component_id
            )));
        }
        if let Some(m) = binding
            .metrics_served
            .iter()
            .find(|m| !SIMULATED_METRICS.contains(&m.as_str()))
        {
            return Err(LaunchError::Failed(format!(
                "no simulated measurement for `{m}`"
            )));
        }
        self.probes.lock().insert(
            binding.key(),
            SimProbe {
                binding: binding.clone(),
                next_due: None,
                outage_since: None,
            },
        );
        Ok(())
    }

    fn stop(&self, key: &BindingKey) {
        self.probes.lock().remove(key);
    }
}
