//! Hierarchical quality model.
//!
//! A model is a forest: internal nodes are monitoring goals, leaves are
//! measurable metrics. Goals and metrics share one identifier namespace.
//! Scores flow bottom-up: raw metric values are normalised onto `[0, 1]` and
//! each goal combines its children with its declared combinator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Min,
    Max,
    P95,
    Rate,
    Last,
}

/// How per-component aggregates of one metric are folded into a single value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossComponentRule {
    #[default]
    Mean,
    /// Min for higher-is-better metrics, max for lower-is-better ones.
    WorstCase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combinator {
    #[default]
    WeightedMean,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDef {
    pub id: NodeId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub unit: String,
    pub direction: Direction,
    /// Raw value scoring 0 for higher-better metrics and 1 for lower-better ones.
    pub norm_lo: f64,
    pub norm_hi: f64,
    pub window_seconds: u64,
    pub statistic: Statistic,
    #[serde(default)]
    pub cross_component: CrossComponentRule,
}

impl MetricDef {
    /// Raw value that scores 1.0.
    pub fn ideal(&self) -> f64 {
        match self.direction {
            Direction::HigherBetter => self.norm_hi,
            Direction::LowerBetter => self.norm_lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalNode {
    pub id: NodeId,
    pub name: String,
    pub children: Vec<NodeId>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub combinator: Combinator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusBands {
    pub ok: f64,
    pub degraded: f64,
}

impl Default for StatusBands {
    fn default() -> Self {
        Self {
            ok: 0.8,
            degraded: 0.5,
        }
    }
}

impl StatusBands {
    pub fn status(&self, score: Option<f64>) -> Status {
        match score {
            None => Status::Unknown,
            Some(s) if s >= self.ok => Status::Ok,
            Some(s) if s >= self.degraded => Status::Degraded,
            Some(_) => Status::Critical,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityModel {
    pub version: String,
    pub roots: Vec<NodeId>,
    pub goals: BTreeMap<NodeId, GoalNode>,
    pub metrics: BTreeMap<NodeId, MetricDef>,
    pub status_bands: StatusBands,
}

/// A single broken model invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("duplicate id `{0}`")]
    DuplicateId(NodeId),
    #[error("goal `{parent}` references unknown child `{child}`")]
    DanglingReference { parent: NodeId, child: NodeId },
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<NodeId>),
    #[error("`{0}` has more than one parent")]
    MultipleParents(NodeId),
    #[error("goal `{0}` has no children")]
    NonMetricLeaf(NodeId),
    #[error("goal `{0}` lists child `{1}` more than once")]
    DuplicateChild(NodeId, NodeId),
    #[error("goal `{0}` has {1} weights for {2} children")]
    WeightCountMismatch(NodeId, usize, usize),
    #[error("goal `{0}` has a negative or non-finite weight")]
    InvalidWeight(NodeId),
    #[error("weighted_mean goal `{0}` has weights summing to zero")]
    ZeroWeightSum(NodeId),
    #[error("root `{0}` is not a goal")]
    RootNotGoal(NodeId),
    #[error("metric `{0}` needs finite norm_lo < norm_hi")]
    InvalidBounds(NodeId),
    #[error("metric `{0}` needs window_seconds >= 1")]
    InvalidWindow(NodeId),
    #[error("status bands need 0 <= degraded <= ok <= 1")]
    InvalidStatusBands,
}

impl Violation {
    /// Short rule name used in machine-readable output.
    pub fn rule(&self) -> &'static str {
        match self {
            Violation::DuplicateId(_) => "DuplicateId",
            Violation::DanglingReference { .. } => "DanglingReference",
            Violation::CycleDetected(_) => "CycleDetected",
            Violation::MultipleParents(_) => "MultipleParents",
            Violation::NonMetricLeaf(_) => "NonMetricLeaf",
            Violation::DuplicateChild(..) => "DuplicateChild",
            Violation::WeightCountMismatch(..) => "WeightCountMismatch",
            Violation::InvalidWeight(_) => "InvalidWeight",
            Violation::ZeroWeightSum(_) => "ZeroWeightSum",
            Violation::RootNotGoal(_) => "RootNotGoal",
            Violation::InvalidBounds(_) => "InvalidBounds",
            Violation::InvalidWindow(_) => "InvalidWindow",
            Violation::InvalidStatusBands => "InvalidStatusBands",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Invalid(#[from] Violation),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("unknown goal `{0}`")]
    UnknownGoal(NodeId),
}

// On-disk representation. Goals may omit weights and combinator.
#[derive(Deserialize, Serialize)]
struct ModelFile {
    version: String,
    roots: Vec<NodeId>,
    goals: Vec<GoalFile>,
    metrics: Vec<MetricDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    status_bands: Option<StatusBands>,
}

#[derive(Deserialize, Serialize)]
struct GoalFile {
    id: NodeId,
    name: String,
    children: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    combinator: Option<Combinator>,
}

/// Parse a model document and check every invariant. The first violation
/// found is returned as the error; use [`check_model_text`] for the full list.
pub fn parse_model(text: &str) -> Result<QualityModel, ModelError> {
    let (model, mut violations) = build_model(text)?;
    violations.extend(validate_model(&model));
    match violations.into_iter().next() {
        Some(v) => Err(v.into()),
        None => Ok(model),
    }
}

/// Every violation in a model document. Only syntax errors are returned as
/// `Err`.
pub fn check_model_text(text: &str) -> Result<Vec<Violation>, ModelError> {
    let (model, mut violations) = build_model(text)?;
    for v in validate_model(&model) {
        if !violations.contains(&v) {
            violations.push(v);
        }
    }
    Ok(violations)
}

// Duplicate ids collapse when keyed into maps, so they are reported here.
fn build_model(text: &str) -> Result<(QualityModel, Vec<Violation>), ModelError> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Syntax {
        line: e.line(),
        message: e.to_string(),
    })?;

    let mut seen = BTreeSet::new();
    let mut violations = Vec::new();
    for id in file
        .goals
        .iter()
        .map(|g| &g.id)
        .chain(file.metrics.iter().map(|m| &m.id))
    {
        if !seen.insert(id.clone()) {
            violations.push(Violation::DuplicateId(id.clone()));
        }
    }

    let goals = file
        .goals
        .into_iter()
        .map(|g| {
            let weights = g.weights.unwrap_or_else(|| vec![1.0; g.children.len()]);
            let node = GoalNode {
                id: g.id,
                name: g.name,
                children: g.children,
                weights,
                combinator: g.combinator.unwrap_or_default(),
            };
            (node.id.clone(), node)
        })
        .collect();
    let metrics = file
        .metrics
        .into_iter()
        .map(|m| (m.id.clone(), m))
        .collect();

    let model = QualityModel {
        version: file.version,
        roots: file.roots,
        goals,
        metrics,
        status_bands: file.status_bands.unwrap_or_default(),
    };
    Ok((model, violations))
}

/// Every invariant violation in `model`, in a deterministic order.
pub fn validate_model(model: &QualityModel) -> Vec<Violation> {
    let mut out = Vec::new();

    let bands = model.status_bands;
    if !(0.0..=1.0).contains(&bands.degraded)
        || !(0.0..=1.0).contains(&bands.ok)
        || bands.degraded > bands.ok
    {
        out.push(Violation::InvalidStatusBands);
    }

    for id in model.goals.keys() {
        if model.metrics.contains_key(id) {
            out.push(Violation::DuplicateId(id.clone()));
        }
    }

    for m in model.metrics.values() {
        if !(m.norm_lo.is_finite() && m.norm_hi.is_finite() && m.norm_lo < m.norm_hi) {
            out.push(Violation::InvalidBounds(m.id.clone()));
        }
        if m.window_seconds < 1 {
            out.push(Violation::InvalidWindow(m.id.clone()));
        }
    }

    let mut parents: BTreeMap<&str, usize> = BTreeMap::new();
    for g in model.goals.values() {
        if g.children.is_empty() {
            out.push(Violation::NonMetricLeaf(g.id.clone()));
        }
        let mut local = BTreeSet::new();
        for child in &g.children {
            if !local.insert(child.as_str()) {
                out.push(Violation::DuplicateChild(g.id.clone(), child.clone()));
                continue;
            }
            if !model.goals.contains_key(child) && !model.metrics.contains_key(child) {
                out.push(Violation::DanglingReference {
                    parent: g.id.clone(),
                    child: child.clone(),
                });
            }
            *parents.entry(child.as_str()).or_default() += 1;
        }
        if g.weights.len() != g.children.len() {
            out.push(Violation::WeightCountMismatch(
                g.id.clone(),
                g.weights.len(),
                g.children.len(),
            ));
        } else if g.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            out.push(Violation::InvalidWeight(g.id.clone()));
        } else if g.combinator == Combinator::WeightedMean
            && !g.children.is_empty()
            && g.weights.iter().sum::<f64>() <= 0.0
        {
            out.push(Violation::ZeroWeightSum(g.id.clone()));
        }
    }
    for (id, count) in parents {
        if count > 1 {
            out.push(Violation::MultipleParents(id.to_string()));
        }
    }

    for root in &model.roots {
        if !model.goals.contains_key(root) {
            out.push(Violation::RootNotGoal(root.clone()));
        }
    }

    out.extend(find_cycles(model).into_iter().map(Violation::CycleDetected));
    out
}

fn find_cycles(model: &QualityModel) -> Vec<Vec<NodeId>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    fn visit<'a>(
        model: &'a QualityModel,
        id: &'a str,
        marks: &mut BTreeMap<&'a str, Mark>,
        path: &mut Vec<&'a str>,
        cycles: &mut Vec<Vec<NodeId>>,
    ) {
        marks.insert(id, Mark::Open);
        path.push(id);
        if let Some(goal) = model.goals.get(id) {
            for child in &goal.children {
                match marks.get(child.as_str()) {
                    Some(Mark::Open) => {
                        let start = path.iter().position(|p| *p == child).unwrap_or(0);
                        let mut cycle: Vec<NodeId> =
                            path[start..].iter().map(|s| s.to_string()).collect();
                        cycle.push(child.clone());
                        cycles.push(cycle);
                    }
                    Some(Mark::Done) => {}
                    None if model.goals.contains_key(child) => {
                        visit(model, child, marks, path, cycles)
                    }
                    None => {}
                }
            }
        }
        path.pop();
        marks.insert(id, Mark::Done);
    }

    let mut marks = BTreeMap::new();
    let mut cycles = Vec::new();
    for id in model.goals.keys() {
        if !marks.contains_key(id.as_str()) {
            visit(model, id, &mut marks, &mut Vec::new(), &mut cycles);
        }
    }
    cycles
}

impl QualityModel {
    pub fn is_goal(&self, id: &str) -> bool {
        self.goals.contains_key(id)
    }

    pub fn is_metric(&self, id: &str) -> bool {
        self.metrics.contains_key(id)
    }

    /// Serialise back to the on-disk document format.
    pub fn to_json(&self) -> serde_json::Value {
        let file = ModelFile {
            version: self.version.clone(),
            roots: self.roots.clone(),
            goals: self
                .goals
                .values()
                .map(|g| GoalFile {
                    id: g.id.clone(),
                    name: g.name.clone(),
                    children: g.children.clone(),
                    weights: Some(g.weights.clone()),
                    combinator: Some(g.combinator),
                })
                .collect(),
            metrics: self.metrics.values().cloned().collect(),
            status_bands: Some(self.status_bands),
        };
        serde_json::to_value(file).expect("model serialises")
    }

    /// Pre-order walk of the subtree rooted at `id`, including `id`.
    pub fn subtree<'a>(&'a self, id: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        let mut seen = BTreeSet::new();
        while let Some(node) = stack.pop() {
            if !seen.insert(node) {
                continue;
            }
            out.push(node);
            if let Some(goal) = self.goals.get(node) {
                stack.extend(goal.children.iter().rev().map(String::as_str));
            }
        }
        out
    }

    /// Map each node to its parent goal.
    pub fn parent_map(&self) -> BTreeMap<&str, &str> {
        self.goals
            .values()
            .flat_map(|g| g.children.iter().map(move |c| (c.as_str(), g.id.as_str())))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSelection {
    pub goal_ids: BTreeSet<NodeId>,
}

impl GoalSelection {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<NodeId>,
    {
        Self {
            goal_ids: ids.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.goal_ids.is_empty()
    }

    pub fn check(&self, model: &QualityModel) -> Result<(), SelectionError> {
        match self.goal_ids.iter().find(|id| !model.is_goal(id)) {
            Some(id) => Err(SelectionError::UnknownGoal(id.clone())),
            None => Ok(()),
        }
    }
}

/// Metric leaves reached from a selection, each with the selected goals it
/// was reached through.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSet {
    pub entries: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl MetricSet {
    pub fn metric_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, metric: &str) -> bool {
        self.entries.contains_key(metric)
    }
}

pub fn resolve_goals(
    model: &QualityModel,
    selection: &GoalSelection,
) -> Result<MetricSet, SelectionError> {
    selection.check(model)?;
    let mut set = MetricSet::default();
    for goal in &selection.goal_ids {
        for node in model.subtree(goal) {
            if model.is_metric(node) {
                set.entries
                    .entry(node.to_string())
                    .or_default()
                    .insert(goal.clone());
            }
        }
    }
    Ok(set)
}

/// Linear map of `raw` onto `[0, 1]` between the metric's bounds, oriented by
/// its direction and clamped.
pub fn normalize_metric(def: &MetricDef, raw: f64) -> f64 {
    let span = def.norm_hi - def.norm_lo;
    let t = (raw - def.norm_lo) / span;
    let score = match def.direction {
        Direction::HigherBetter => t,
        Direction::LowerBetter => 1.0 - t,
    };
    if score.is_nan() {
        0.0
    } else {
        score.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Degraded,
    Critical,
    Unknown,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Ok => "ok",
            Status::Degraded => "degraded",
            Status::Critical => "critical",
            Status::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Goal,
    Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub kind: NodeKind,
    pub score: Option<f64>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<f64>,
    pub confidence: f64,
    /// Per-component aggregates behind a metric's raw value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub timestamp: i64,
    pub nodes: BTreeMap<NodeId, NodeScore>,
}

impl ScoreReport {
    pub fn score(&self, id: &str) -> Option<f64> {
        self.nodes.get(id).and_then(|n| n.score)
    }
}

/// Score every node of every selected subtree from raw metric values.
///
/// Missing values leave the leaf unknown. A weighted-mean goal renormalises
/// over children that have a score; min/max goals skip them. Confidence is
/// the share of descendant-leaf weight that had data.
pub fn compute_scores(
    model: &QualityModel,
    selection: &GoalSelection,
    values: &BTreeMap<NodeId, Option<f64>>,
    timestamp: i64,
) -> Result<ScoreReport, SelectionError> {
    selection.check(model)?;
    let mut nodes = BTreeMap::new();
    for goal in &selection.goal_ids {
        score_node(model, goal, values, &mut nodes);
    }
    Ok(ScoreReport { timestamp, nodes })
}

fn score_node(
    model: &QualityModel,
    id: &str,
    values: &BTreeMap<NodeId, Option<f64>>,
    out: &mut BTreeMap<NodeId, NodeScore>,
) -> (Option<f64>, f64) {
    if let Some(done) = out.get(id) {
        return (done.score, done.confidence);
    }
    let bands = model.status_bands;

    if let Some(def) = model.metrics.get(id) {
        let raw = values
            .get(id)
            .copied()
            .flatten()
            .filter(|v| v.is_finite());
        let score = raw.map(|r| normalize_metric(def, r));
        let confidence = if score.is_some() { 1.0 } else { 0.0 };
        out.insert(
            id.to_string(),
            NodeScore {
                kind: NodeKind::Metric,
                score,
                status: bands.status(score),
                raw,
                confidence,
                components: None,
            },
        );
        return (score, confidence);
    }

    let goal = &model.goals[id];
    let children: Vec<(Option<f64>, f64)> = goal
        .children
        .iter()
        .map(|c| score_node(model, c, values, out))
        .collect();

    let (score, confidence) = match goal.combinator {
        Combinator::WeightedMean => {
            let total: f64 = goal.weights.iter().sum();
            let mut present_weight = 0.0;
            let mut acc = 0.0;
            let mut confidence = 0.0;
            for ((score, conf), w) in children.iter().zip(&goal.weights) {
                confidence += w / total * conf;
                if let Some(s) = score {
                    present_weight += w;
                    acc += w * s;
                }
            }
            let score = (present_weight > 0.0).then(|| (acc / present_weight).clamp(0.0, 1.0));
            (score, confidence)
        }
        Combinator::Min | Combinator::Max => {
            let n = children.len() as f64;
            let confidence = children.iter().map(|(_, c)| c / n).sum();
            let present = children.iter().filter_map(|(s, _)| *s);
            let score = if goal.combinator == Combinator::Min {
                present.reduce(f64::min)
            } else {
                present.reduce(f64::max)
            };
            (score, confidence)
        }
    };
    let confidence = f64::clamp(confidence, 0.0, 1.0);
    out.insert(
        id.to_string(),
        NodeScore {
            kind: NodeKind::Goal,
            score,
            status: bands.status(score),
            raw: None,
            confidence,
            components: None,
        },
    );
    (score, confidence)
}
