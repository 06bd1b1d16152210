//! Probe catalog and plan matching.
//!
//! Matching runs a greedy weighted set cover independently for every
//! component: the universe is the set of required metrics at that component,
//! the candidate sets are the probes whose selector admits the component.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architecture::{ArchitectureDescriptor, ComponentDescriptor, ComponentId, Layer};
use crate::model::{MetricSet, NodeId};

pub type ProbeId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    Simulated,
    LocalProcess,
}

impl fmt::Display for ExecutorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutorKind::Simulated => "simulated",
            ExecutorKind::LocalProcess => "local_process",
        })
    }
}

/// Conjunctive component selector. An empty field places no constraint;
/// `layers` and `kinds` match any listed value, `tags` must all be present.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub layers: BTreeSet<Layer>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub kinds: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tags: BTreeSet<String>,
}

impl Selector {
    pub fn admits(&self, c: &ComponentDescriptor) -> bool {
        (self.layers.is_empty() || self.layers.contains(&c.layer))
            && (self.kinds.is_empty() || self.kinds.contains(&c.kind))
            && self.tags.is_subset(&c.tags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDescriptor {
    pub id: ProbeId,
    pub provides: BTreeSet<NodeId>,
    #[serde(default)]
    pub applies_to: Selector,
    pub executor: ExecutorKind,
    pub interval_seconds: u64,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub config_keys: BTreeSet<String>,
    /// Program and arguments for `local_process` probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CatalogError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate probe `{0}`")]
    DuplicateProbe(ProbeId),
    #[error("probe `{0}` provides no metrics")]
    EmptyProvides(ProbeId),
    #[error("probe `{0}` needs interval_seconds >= 1")]
    InvalidInterval(ProbeId),
    #[error("probe `{0}` needs a positive finite cost")]
    InvalidCost(ProbeId),
}

#[derive(Deserialize)]
struct CatalogFile {
    probes: Vec<ProbeDescriptor>,
}

pub fn load_catalog(text: &str) -> Result<Vec<ProbeDescriptor>, CatalogError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let file: CatalogFile = serde_json::from_str(text).map_err(|e| CatalogError::Syntax {
        line: e.line(),
        message: e.to_string(),
    })?;
    validate_catalog(&file.probes)?;
    Ok(file.probes)
}

pub fn validate_catalog(probes: &[ProbeDescriptor]) -> Result<(), CatalogError> {
    let mut seen = BTreeSet::new();
    for p in probes {
        if !seen.insert(p.id.as_str()) {
            return Err(CatalogError::DuplicateProbe(p.id.clone()));
        }
        if p.provides.is_empty() {
            return Err(CatalogError::EmptyProvides(p.id.clone()));
        }
        if p.interval_seconds < 1 {
            return Err(CatalogError::InvalidInterval(p.id.clone()));
        }
        if !(p.cost.is_finite() && p.cost > 0.0) {
            return Err(CatalogError::InvalidCost(p.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BindingKey {
    pub probe_id: ProbeId,
    pub component_id: ComponentId,
}

impl BindingKey {
    pub fn new(probe_id: impl Into<ProbeId>, component_id: impl Into<ComponentId>) -> Self {
        Self {
            probe_id: probe_id.into(),
            component_id: component_id.into(),
        }
    }
}

impl fmt::Display for BindingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.probe_id, self.component_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeBinding {
    pub probe_id: ProbeId,
    pub component_id: ComponentId,
    pub metrics_served: BTreeSet<NodeId>,
    pub config: BTreeMap<String, String>,
    pub executor: ExecutorKind,
    pub interval_seconds: u64,
}

impl ProbeBinding {
    pub fn key(&self) -> BindingKey {
        BindingKey::new(self.probe_id.clone(), self.component_id.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub bindings: Vec<ProbeBinding>,
    pub covered: BTreeSet<(NodeId, ComponentId)>,
}

impl ProbePlan {
    pub fn keys(&self) -> BTreeSet<BindingKey> {
        self.bindings.iter().map(ProbeBinding::key).collect()
    }

    pub fn total_cost(&self, catalog: &[ProbeDescriptor]) -> f64 {
        self.bindings
            .iter()
            .map(|b| {
                catalog
                    .iter()
                    .find(|p| p.id == b.probe_id)
                    .map_or(0.0, |p| p.cost)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchError {
    #[error("no probe can measure: {}", .0.join(", "))]
    UncoveredMetrics(Vec<NodeId>),
    #[error("probe `{probe}` needs config key `{key}` that component `{component}` cannot supply")]
    UnresolvableConfig {
        probe: ProbeId,
        component: ComponentId,
        key: String,
    },
}

/// Every (metric, component) pair that some catalog probe could measure.
pub fn required_pairs(
    metric_set: &MetricSet,
    arch: &ArchitectureDescriptor,
    catalog: &[ProbeDescriptor],
) -> BTreeSet<(NodeId, ComponentId)> {
    let mut out = BTreeSet::new();
    for metric in metric_set.metric_ids() {
        for c in &arch.components {
            if catalog
                .iter()
                .any(|p| p.provides.contains(metric) && p.applies_to.admits(c))
            {
                out.insert((metric.to_string(), c.id.clone()));
            }
        }
    }
    out
}

/// Metrics in the set that no (probe, component) pair can measure.
pub fn uncovered_metrics(
    metric_set: &MetricSet,
    arch: &ArchitectureDescriptor,
    catalog: &[ProbeDescriptor],
) -> Vec<NodeId> {
    let pairs = required_pairs(metric_set, arch, catalog);
    let coverable: BTreeSet<&str> = pairs.iter().map(|(m, _)| m.as_str()).collect();
    metric_set
        .metric_ids()
        .filter(|m| !coverable.contains(m))
        .map(str::to_string)
        .collect()
}

fn resolve_config(
    probe: &ProbeDescriptor,
    component: &ComponentDescriptor,
) -> Result<BTreeMap<String, String>, MatchError> {
    probe
        .config_keys
        .iter()
        .map(|key| {
            let value = match key.as_str() {
                "target" => component.endpoint.as_ref().map(|e| e.address.clone()),
                "protocol" => component.endpoint.as_ref().map(|e| {
                    serde_json::to_value(e.protocol)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default()
                }),
                "component" => Some(component.id.clone()),
                "kind" => Some(component.kind.clone()),
                _ => None,
            };
            value
                .map(|v| (key.clone(), v))
                .ok_or_else(|| MatchError::UnresolvableConfig {
                    probe: probe.id.clone(),
                    component: component.id.clone(),
                    key: key.clone(),
                })
        })
        .collect()
}

/// Greedy cover of `required` from `candidates`. Returns the chosen probes in
/// pick order with the metrics each newly covered. Equal ratios favour the
/// probe covering more, then the smallest id.
pub fn greedy_cover<'a>(
    required: &BTreeSet<&'a str>,
    candidates: &[&'a ProbeDescriptor],
) -> Vec<(&'a ProbeDescriptor, BTreeSet<&'a str>)> {
    let mut uncovered = required.clone();
    let mut picks = Vec::new();
    let mut used = BTreeSet::new();
    while !uncovered.is_empty() {
        let mut best: Option<(f64, &ProbeDescriptor, BTreeSet<&str>)> = None;
        for probe in candidates {
            if used.contains(probe.id.as_str()) {
                continue;
            }
            let gain: BTreeSet<&str> = probe
                .provides
                .iter()
                .map(String::as_str)
                .filter(|m| uncovered.contains(m))
                .collect();
            if gain.is_empty() {
                continue;
            }
            let ratio = gain.len() as f64 / probe.cost;
            let better = match &best {
                None => true,
                Some((r, p, g)) => {
                    ratio > *r
                        || (ratio == *r
                            && (gain.len(), std::cmp::Reverse(&probe.id))
                                > (g.len(), std::cmp::Reverse(&p.id)))
                }
            };
            if better {
                best = Some((ratio, probe, gain));
            }
        }
        let Some((_, probe, gain)) = best else { break };
        used.insert(probe.id.as_str());
        for m in &gain {
            uncovered.remove(m);
        }
        picks.push((probe, gain));
    }
    picks
}

pub fn match_probes(
    metric_set: &MetricSet,
    arch: &ArchitectureDescriptor,
    catalog: &[ProbeDescriptor],
) -> Result<ProbePlan, MatchError> {
    let uncovered = uncovered_metrics(metric_set, arch, catalog);
    if !uncovered.is_empty() {
        return Err(MatchError::UncoveredMetrics(uncovered));
    }

    let mut components: Vec<&ComponentDescriptor> = arch.components.iter().collect();
    components.sort_by(|a, b| a.id.cmp(&b.id));

    let mut plan = ProbePlan::default();
    for component in components {
        let candidates: Vec<&ProbeDescriptor> = catalog
            .iter()
            .filter(|p| p.applies_to.admits(component))
            .collect();
        let required: BTreeSet<&str> = metric_set
            .metric_ids()
            .filter(|m| candidates.iter().any(|p| p.provides.contains(*m)))
            .collect();
        for (probe, gain) in greedy_cover(&required, &candidates) {
            let config = resolve_config(probe, component)?;
            for m in &gain {
                plan.covered.insert((m.to_string(), component.id.clone()));
            }
            plan.bindings.push(ProbeBinding {
                probe_id: probe.id.clone(),
                component_id: component.id.clone(),
                metrics_served: gain.into_iter().map(str::to_string).collect(),
                config,
                executor: probe.executor,
                interval_seconds: probe.interval_seconds,
            });
        }
    }
    Ok(plan)
}
