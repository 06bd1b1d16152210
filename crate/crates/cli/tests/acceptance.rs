//! Acceptance suite. Each criterion runs independently and reports one
//! `[PASS]`/`[FAIL]` line; the process fails if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::{json, Value};

use cloudhealth_core::architecture::{ArchitectureDescriptor, ComponentDescriptor, Layer};
use cloudhealth_core::catalog::{
    match_probes, BindingKey, ExecutorKind, MatchError, ProbeBinding, ProbeDescriptor, ProbePlan,
    Selector,
};
use cloudhealth_core::deploy::{
    apply_plan, diff_plans, DeploymentState, Executors, LaunchError, ProbeExecutor,
};
use cloudhealth_core::model::{
    compute_scores, parse_model, resolve_goals, Combinator, Direction, GoalNode, GoalSelection,
    MetricDef, MetricSet, QualityModel, Statistic, StatusBands,
};
use cloudhealth_core::pipeline::{Sample, SeriesStore, CLOCK_SKEW_MS};
use cloudhealth_core::sim::{FaultKind, FaultSpec, SimConfig, Simulation};

use common::{leaves_under, shipped, shipped_inputs, Service, BIN};

const SEED: [u8; 32] = *b"cloudhealth-acceptance-seed-0042";

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &SEED))
}

fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Criterion 1

fn criterion_1() -> Result<String, String> {
    let text = std::fs::read_to_string(shipped("models/default.json")).map_err(|e| e.to_string())?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let model = parse_model(&text).map_err(|e| e.to_string())?;

    let reliability = doc["goals"]
        .as_array()
        .unwrap()
        .iter()
        .find(|g| g["id"] == "reliability")
        .ok_or("no reliability goal")?;
    let children: BTreeSet<&str> = reliability["children"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    let expected_children = BTreeSet::from(["availability", "continuity", "recoverability"]);
    if children != expected_children {
        return Err(format!("reliability children in file: {children:?}"));
    }

    let mut expected: Vec<String> = expected_children
        .iter()
        .flat_map(|g| leaves_under(&doc, g))
        .collect();
    expected.sort();
    let metrics = resolve_goals(&model, &GoalSelection::new(["reliability"])).map_err(|e| e.to_string())?;
    let got: Vec<String> = metrics.metric_ids().map(String::from).collect();
    if got != expected {
        return Err(format!("resolved {got:?}, expected {expected:?}"));
    }

    let service = Service::start(&[]);
    let (status, goals) = service.get("/goals");
    if status != 200 {
        return Err(format!("GET /goals -> {status}"));
    }
    let served = goals
        .as_array()
        .unwrap()
        .iter()
        .find(|g| g["id"] == "reliability")
        .ok_or("reliability missing from /goals")?;
    let served: BTreeSet<&str> = served["children"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    if served != expected_children {
        return Err(format!("GET /goals lists {served:?}"));
    }
    Ok(format!("leaves {}", got.join(",")))
}

// ---------------------------------------------------------------------------
// Criterion 2

#[derive(Debug, Clone, Copy)]
struct Poll {
    ts: i64,
    availability: Option<f64>,
    performance: Option<f64>,
}

fn poll_until(service: &Service, until_ms: i64, polls: &mut Vec<Poll>, deadline: Instant) -> Result<(), String> {
    loop {
        if Instant::now() > deadline {
            return Err("wall-clock budget exhausted while polling".into());
        }
        let (status, report) = service.get("/kpis?view=manager");
        if status != 200 {
            return Err(format!("GET /kpis -> {status}"));
        }
        let ts = report["timestamp"].as_i64().unwrap();
        polls.push(Poll {
            ts,
            availability: report["nodes"]["availability"]["score"].as_f64(),
            performance: report["nodes"]["performance"]["score"].as_f64(),
        });
        if ts >= until_ms {
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn max_window_seconds(model: &Value, goal: &str) -> i64 {
    let leaves = leaves_under(model, goal);
    model["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|m| leaves.iter().any(|l| m["id"] == l.as_str()))
        .map(|m| m["window_seconds"].as_i64().unwrap())
        .max()
        .unwrap()
}

fn criterion_2() -> Result<String, String> {
    let started = Instant::now();
    let deadline = started + Duration::from_secs(30);
    let service = Service::start(&["--sim", "--sim-seed", "42", "--sim-speedup", "100"]);

    let (_, model) = service.get("/model");
    let window_ms = max_window_seconds(&model, "availability") * 1000;

    let (status, _) = service.put_json("/selection", &json!(["reliability", "performance"]));
    if status != 200 {
        return Err(format!("PUT /selection -> {status}"));
    }
    let (status, summary) = service.post("/deploy", "");
    if status != 200 {
        return Err(format!("POST /deploy -> {status}: {summary}"));
    }
    if !summary["failed"].as_array().unwrap().is_empty() {
        return Err(format!("bindings failed to launch: {}", summary["failed"]));
    }
    let (_, sim) = service.get("/sim");
    let deployed_at = sim["now_ms"].as_i64().unwrap();

    let mut polls = Vec::new();
    poll_until(&service, deployed_at + 60_000, &mut polls, deadline)?;

    let (status, fault) = service.post_json(
        "/sim/faults",
        &json!({"kind": "downtime", "component_id": "meter_aggregator", "duration_ticks": 30}),
    );
    if status != 201 {
        return Err(format!("POST /sim/faults -> {status}: {fault}"));
    }
    let fault_start = fault["start_ms"].as_i64().unwrap();
    let fault_end = fault["end_ms"].as_i64().unwrap();
    let recovered_by = fault_end + 2 * window_ms;
    poll_until(&service, recovered_by + 15_000, &mut polls, deadline)?;

    // Baseline: windows full, fault not yet started.
    let baseline: Vec<&Poll> = polls
        .iter()
        .filter(|p| p.ts >= deployed_at + window_ms && p.ts < fault_start)
        .collect();
    let avail_base = mean(baseline.iter().filter_map(|p| p.availability)).ok_or("no availability baseline")?;
    let perf_base = mean(baseline.iter().filter_map(|p| p.performance)).ok_or("no performance baseline")?;

    let during: Vec<f64> = polls
        .iter()
        .filter(|p| p.ts > fault_start && p.ts <= fault_end)
        .filter_map(|p| p.availability)
        .collect();
    let avail_fault = mean(during.iter().copied()).ok_or("no polls during the fault")?;
    if avail_fault > avail_base - 0.2 {
        return Err(format!(
            "availability during fault {avail_fault:.3} not 0.2 below baseline {avail_base:.3}"
        ));
    }

    let after: Vec<&Poll> = polls.iter().filter(|p| p.ts >= recovered_by).collect();
    if after.is_empty() {
        return Err("no polls after the recovery point".into());
    }
    for p in &after {
        let a = p.availability.ok_or("availability unknown after recovery")?;
        if (a - avail_base).abs() > 0.05 {
            return Err(format!(
                "availability {a:.3} at +{} s after fault end, baseline {avail_base:.3}",
                (p.ts - fault_end) / 1000
            ));
        }
    }

    let mut perf_dev: f64 = 0.0;
    for p in polls.iter().filter(|p| p.ts > fault_start) {
        let perf = p.performance.ok_or("performance unknown during run")?;
        perf_dev = perf_dev.max((perf - perf_base).abs());
    }
    if perf_dev > 0.05 {
        return Err(format!("performance moved {perf_dev:.3} from baseline {perf_base:.3}"));
    }

    let min_fault = during.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "availability baseline {avail_base:.3}, fault mean {avail_fault:.3} (min {min_fault:.3}), \
         recovered by +{} s; performance max deviation {perf_dev:.3}; {} polls",
        2 * window_ms / 1000,
        polls.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 3

#[derive(Debug, Clone)]
struct CoverInstance {
    model: QualityModel,
    selection: GoalSelection,
    arch: ArchitectureDescriptor,
    catalog: Vec<ProbeDescriptor>,
}

fn metric_def(id: &str) -> MetricDef {
    MetricDef {
        id: id.into(),
        name: id.into(),
        description: None,
        unit: "u".into(),
        direction: Direction::HigherBetter,
        norm_lo: 0.0,
        norm_hi: 1.0,
        window_seconds: 10,
        statistic: Statistic::Mean,
        cross_component: Default::default(),
    }
}

const KINDS: [&str; 2] = ["gateway", "service"];
const TAGS: [&str; 2] = ["control", "metering"];

fn pick<T: Clone + Ord>(items: &[T], mask: u8) -> BTreeSet<T> {
    items
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, t)| t.clone())
        .collect()
}

fn cover_instance() -> impl Strategy<Value = CoverInstance> {
    (1usize..=8, 1usize..=3, 1usize..=5, 1usize..=10).prop_flat_map(|(n_metrics, n_goals, n_comp, n_probes)| {
        let n_goals = n_goals.min(n_metrics);
        let components = prop::collection::vec((0usize..4, 0usize..2, 0u8..4), n_comp);
        // Providing sets may include ids outside the model.
        let probes = prop::collection::vec(
            (1u16..(1 << (n_metrics + 1)), 0u8..16, 0u8..4, 0u8..4, 1u32..=8),
            n_probes,
        );
        let assignment = prop::collection::vec(0..n_goals, n_metrics);
        let selected = 1u8..(1 << n_goals);
        (Just((n_metrics, n_goals)), components, probes, assignment, selected)
    })
    .prop_map(|((n_metrics, n_goals), components, probes, assignment, selected)| {
        let metric_ids: Vec<String> = (0..n_metrics).map(|i| format!("m{i}")).collect();
        let mut goals: BTreeMap<String, GoalNode> = (0..n_goals)
            .map(|g| {
                let id = format!("g{g}");
                (
                    id.clone(),
                    GoalNode {
                        id,
                        name: String::new(),
                        children: vec![],
                        weights: vec![],
                        combinator: Combinator::WeightedMean,
                    },
                )
            })
            .collect();
        // every goal gets at least one metric
        for (i, m) in metric_ids.iter().enumerate() {
            let g = if i < n_goals { i } else { assignment[i] };
            let node = goals.get_mut(&format!("g{g}")).unwrap();
            node.children.push(m.clone());
            node.weights.push(1.0);
        }
        let model = QualityModel {
            version: "1".into(),
            roots: goals.keys().cloned().collect(),
            goals,
            metrics: metric_ids.iter().map(|m| (m.clone(), metric_def(m))).collect(),
            status_bands: StatusBands::default(),
        };
        let selection = GoalSelection::new(
            (0..n_goals)
                .filter(|g| selected & (1 << g) != 0)
                .map(|g| format!("g{g}")),
        );
        let arch = ArchitectureDescriptor {
            name: "generated".into(),
            components: components
                .iter()
                .enumerate()
                .map(|(i, &(layer, kind, tags))| ComponentDescriptor {
                    id: format!("c{i}"),
                    name: String::new(),
                    layer: Layer::ALL[layer],
                    kind: KINDS[kind].into(),
                    endpoint: None,
                    tags: pick(&TAGS.map(String::from), tags),
                    parent: None,
                })
                .collect(),
        };
        let extended: Vec<String> = (0..=n_metrics).map(|i| format!("m{i}")).collect();
        let catalog = probes
            .iter()
            .enumerate()
            .map(|(i, &(provides, layers, kinds, tags, cost))| ProbeDescriptor {
                id: format!("p{i}"),
                provides: extended
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| provides & (1 << j) != 0)
                    .map(|(_, m)| m.clone())
                    .collect(),
                applies_to: Selector {
                    // Most probes are unconstrained on a given axis.
                    layers: if layers < 8 { BTreeSet::new() } else { pick(&Layer::ALL, layers) },
                    kinds: if kinds < 2 { BTreeSet::new() } else { pick(&KINDS.map(String::from), kinds) },
                    tags: if tags < 3 { BTreeSet::new() } else { pick(&TAGS.map(String::from), tags) },
                },
                executor: ExecutorKind::Simulated,
                interval_seconds: 1,
                cost: cost as f64 * 0.5,
                config_keys: BTreeSet::new(),
                command: None,
            })
            .collect();
        CoverInstance {
            model,
            selection,
            arch,
            catalog,
        }
    })
}

fn oracle_admits(p: &ProbeDescriptor, c: &ComponentDescriptor) -> bool {
    let layer_ok = p.applies_to.layers.is_empty() || p.applies_to.layers.iter().any(|l| *l == c.layer);
    let kind_ok = p.applies_to.kinds.is_empty() || p.applies_to.kinds.iter().any(|k| *k == c.kind);
    let tags_ok = p.applies_to.tags.iter().all(|t| c.tags.contains(t));
    layer_ok && kind_ok && tags_ok
}

fn oracle_metrics(inst: &CoverInstance) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<&str> = inst.selection.goal_ids.iter().map(String::as_str).collect();
    while let Some(id) = stack.pop() {
        match inst.model.goals.get(id) {
            Some(g) => stack.extend(g.children.iter().map(String::as_str)),
            None => {
                out.insert(id.to_string());
            }
        }
    }
    out
}

/// Minimum total cost of covering `required` at `component`, by enumeration.
fn exhaustive_optimum(required: &BTreeSet<&str>, candidates: &[&ProbeDescriptor]) -> f64 {
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << candidates.len()) {
        let chosen = candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, p)| *p);
        let mut covered = BTreeSet::new();
        let mut cost = 0.0;
        for p in chosen {
            cost += p.cost;
            covered.extend(p.provides.iter().map(String::as_str));
        }
        if required.iter().all(|m| covered.contains(m)) {
            best = best.min(cost);
        }
    }
    best
}

fn check_cover(inst: CoverInstance, worst_ratio: &MaxCell) -> Result<(), TestCaseError> {
    let metrics = oracle_metrics(&inst);
    let mut required: BTreeSet<(String, String)> = BTreeSet::new();
    for m in &metrics {
        for c in &inst.arch.components {
            if inst.catalog.iter().any(|p| p.provides.contains(m) && oracle_admits(p, c)) {
                required.insert((m.clone(), c.id.clone()));
            }
        }
    }
    let uncovered: Vec<String> = metrics
        .iter()
        .filter(|m| !required.iter().any(|(rm, _)| rm == *m))
        .cloned()
        .collect();

    let metric_set = resolve_goals(&inst.model, &inst.selection).unwrap();
    prop_assert_eq!(
        metric_set.metric_ids().map(String::from).collect::<BTreeSet<_>>(),
        metrics.clone()
    );

    let plan = match match_probes(&metric_set, &inst.arch, &inst.catalog) {
        Err(MatchError::UncoveredMetrics(reported)) => {
            prop_assert_eq!(&reported, &uncovered);
            let coverable = MetricSet {
                entries: metric_set
                    .entries
                    .into_iter()
                    .filter(|(m, _)| !uncovered.contains(m))
                    .collect(),
            };
            match_probes(&coverable, &inst.arch, &inst.catalog)
                .map_err(|e| TestCaseError::fail(format!("coverable subset failed: {e}")))?
        }
        Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
        Ok(plan) => {
            prop_assert!(uncovered.is_empty(), "expected uncovered {:?}", uncovered);
            plan
        }
    };

    prop_assert_eq!(&plan.covered, &required);
    let mut served = BTreeSet::new();
    for b in &plan.bindings {
        let probe = inst.catalog.iter().find(|p| p.id == b.probe_id).unwrap();
        let component = inst.arch.components.iter().find(|c| c.id == b.component_id).unwrap();
        prop_assert!(oracle_admits(probe, component));
        prop_assert!(!b.metrics_served.is_empty());
        for m in &b.metrics_served {
            prop_assert!(probe.provides.contains(m));
            prop_assert!(served.insert((m.clone(), b.component_id.clone())), "pair served twice");
        }
    }
    prop_assert_eq!(&served, &required);

    let greedy = plan.total_cost(&inst.catalog);
    let mut optimum = 0.0;
    for c in &inst.arch.components {
        let need: BTreeSet<&str> = required
            .iter()
            .filter(|(_, rc)| *rc == c.id)
            .map(|(m, _)| m.as_str())
            .collect();
        if need.is_empty() {
            continue;
        }
        let candidates: Vec<&ProbeDescriptor> = inst
            .catalog
            .iter()
            .filter(|p| oracle_admits(p, c) && p.provides.iter().any(|m| need.contains(m.as_str())))
            .collect();
        optimum += exhaustive_optimum(&need, &candidates);
    }
    prop_assert!(greedy <= 2.0 * optimum + 1e-9, "greedy {} vs optimum {}", greedy, optimum);
    if optimum > 0.0 {
        worst_ratio.update(greedy / optimum);
    }
    Ok(())
}

/// Running maximum shared with a property closure.
#[derive(Default)]
struct MaxCell(std::sync::Mutex<f64>);

impl MaxCell {
    fn update(&self, v: f64) {
        let mut m = self.0.lock().unwrap();
        *m = m.max(v);
    }

    fn get(&self) -> f64 {
        *self.0.lock().unwrap()
    }
}

fn criterion_3() -> Result<String, String> {
    let worst = MaxCell::default();
    let uncovered_cases = AtomicUsize::new(0);
    run_property(256, cover_instance(), |inst| {
        let metrics = oracle_metrics(&inst);
        let all_coverable = metrics.iter().all(|m| {
            inst.catalog.iter().any(|p| {
                p.provides.contains(m) && inst.arch.components.iter().any(|c| oracle_admits(p, c))
            })
        });
        if !all_coverable {
            uncovered_cases.fetch_add(1, Ordering::Relaxed);
        }
        check_cover(inst, &worst)
    })?;
    Ok(format!(
        "256 instances ({} with uncovered metrics), worst greedy/optimum {:.3}",
        uncovered_cases.load(Ordering::Relaxed),
        worst.get()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4

#[derive(Default)]
struct Recorder {
    launches: AtomicUsize,
    stops: AtomicUsize,
}

impl ProbeExecutor for Recorder {
    fn launch(&self, _: &ProbeBinding) -> Result<(), LaunchError> {
        self.launches.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn stop(&self, _: &BindingKey) {
        self.stops.fetch_add(1, Ordering::Relaxed);
    }
}

fn plan_strategy() -> impl Strategy<Value = ProbePlan> {
    prop::collection::btree_map((0u8..4, 0u8..4), (1u64..=3, 0u8..3), 0..12).prop_map(|m| {
        let bindings: Vec<ProbeBinding> = m
            .into_iter()
            .map(|((p, c), (interval, metric))| ProbeBinding {
                probe_id: format!("p{p}"),
                component_id: format!("c{c}"),
                metrics_served: BTreeSet::from([format!("m{metric}")]),
                config: BTreeMap::new(),
                executor: ExecutorKind::Simulated,
                interval_seconds: interval,
            })
            .collect();
        ProbePlan {
            covered: bindings
                .iter()
                .flat_map(|b| b.metrics_served.iter().map(|m| (m.clone(), b.component_id.clone())))
                .collect(),
            bindings,
        }
    })
}

fn criterion_4() -> Result<String, String> {
    run_property(512, (plan_strategy(), plan_strategy()), |(a, b)| {
        let recorder = Arc::new(Recorder::default());
        let mut executors = Executors::new();
        executors.register(ExecutorKind::Simulated, recorder.clone());
        let empty = DeploymentState::default();

        let once = apply_plan(&empty, &a, &executors, 1_000).unwrap();
        let launches = recorder.launches.load(Ordering::Relaxed);
        let twice = apply_plan(&once, &a, &executors, 1_000).unwrap();
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(recorder.launches.load(Ordering::Relaxed), launches);
        prop_assert_eq!(once.running_keys(), a.keys());

        // brute-force set difference between the live A entries and B
        let a_map: BTreeMap<BindingKey, &ProbeBinding> = a.bindings.iter().map(|x| (x.key(), x)).collect();
        let b_map: BTreeMap<BindingKey, &ProbeBinding> = b.bindings.iter().map(|x| (x.key(), x)).collect();
        let changed: BTreeSet<BindingKey> = a_map
            .iter()
            .filter(|(k, v)| b_map.get(*k).is_some_and(|w| w != *v))
            .map(|(k, _)| k.clone())
            .collect();
        let expect_stop: BTreeSet<BindingKey> = a_map
            .keys()
            .filter(|k| !b_map.contains_key(*k))
            .cloned()
            .chain(changed.iter().cloned())
            .collect();
        let expect_start: BTreeSet<BindingKey> = b_map
            .keys()
            .filter(|k| !a_map.contains_key(*k))
            .cloned()
            .chain(changed.iter().cloned())
            .collect();
        let expect_unchanged: BTreeSet<BindingKey> = a_map
            .iter()
            .filter(|(k, v)| b_map.get(*k).is_some_and(|w| w == *v))
            .map(|(k, _)| k.clone())
            .collect();

        let diff = diff_plans(&once, &b);
        let stop: BTreeSet<BindingKey> = diff.to_stop.iter().cloned().collect();
        let start: BTreeSet<BindingKey> = diff.to_start.iter().map(ProbeBinding::key).collect();
        let unchanged: BTreeSet<BindingKey> = diff.unchanged.iter().cloned().collect();
        prop_assert_eq!(stop.len(), diff.to_stop.len());
        prop_assert_eq!(start.len(), diff.to_start.len());
        prop_assert_eq!(stop, expect_stop);
        prop_assert_eq!(start, expect_start);
        prop_assert_eq!(unchanged, expect_unchanged);

        // convergence onto B, then idempotence there
        let moved = apply_plan(&once, &b, &executors, 2_000).unwrap();
        prop_assert_eq!(moved.running_keys(), b.keys());
        for binding in &b.bindings {
            prop_assert_eq!(&moved.entries[&binding.key()].binding, binding);
        }
        let again = apply_plan(&moved, &b, &executors, 3_000).unwrap();
        prop_assert_eq!(again, moved);
        Ok(())
    })?;
    Ok("512 random plan pairs".into())
}

// ---------------------------------------------------------------------------
// Criterion 5

#[derive(Debug, Clone)]
struct ScoreInstance {
    model: QualityModel,
    values: BTreeMap<String, Option<f64>>,
    order: Vec<String>,
}

fn score_instance() -> impl Strategy<Value = ScoreInstance> {
    (1usize..=7)
        .prop_flat_map(|n| {
            let metrics = prop::collection::vec((any::<bool>(), -50.0f64..50.0, 0.1f64..100.0), n);
            let values = prop::collection::vec(prop::option::weighted(0.8, -80.0f64..180.0), n);
            // grouping decisions: (how many to take, which combinator, weights)
            let groups = prop::collection::vec(
                (1usize..=3, 0u8..3, prop::collection::vec(0.1f64..5.0, 3), any::<u64>()),
                2 * n + 2,
            );
            (metrics, values, groups, any::<u64>())
        })
        .prop_map(|(metrics, values, groups, shuffle)| {
            let defs: BTreeMap<String, MetricDef> = metrics
                .iter()
                .enumerate()
                .map(|(i, &(higher, lo, span))| {
                    let id = format!("m{i}");
                    let mut d = metric_def(&id);
                    d.direction = if higher { Direction::HigherBetter } else { Direction::LowerBetter };
                    d.norm_lo = lo;
                    d.norm_hi = lo + span;
                    (id, d)
                })
                .collect();
            let mut pool: Vec<String> = defs.keys().cloned().collect();
            let mut goals = BTreeMap::new();
            let mut next = 0;
            let mut group_iter = groups.into_iter().cycle();
            // Fold the pool into goals until only goals remain and there are at most two.
            while pool.len() > 2 || pool.iter().any(|id| defs.contains_key(id)) {
                let (take, comb, weights, salt) = group_iter.next().unwrap();
                let (take, start) = if pool.len() > 2 {
                    let take = take.clamp(2, pool.len());
                    (take, (salt as usize) % (pool.len() - take + 1))
                } else {
                    // wrap a leftover metric on its own
                    (1, pool.iter().position(|id| defs.contains_key(id)).unwrap())
                };
                let children: Vec<String> = pool.drain(start..start + take).collect();
                let id = format!("g{next}");
                next += 1;
                goals.insert(
                    id.clone(),
                    GoalNode {
                        id: id.clone(),
                        name: String::new(),
                        weights: weights[..children.len()].to_vec(),
                        children,
                        combinator: [Combinator::WeightedMean, Combinator::Min, Combinator::Max][comb as usize],
                    },
                );
                pool.push(id);
            }
            let values = values
                .into_iter()
                .enumerate()
                .map(|(i, v)| (format!("m{i}"), v))
                .collect();
            let mut order: Vec<String> = goals.keys().cloned().collect();
            let k = order.len();
            order.rotate_left((shuffle as usize) % k);
            order.reverse();
            ScoreInstance {
                model: QualityModel {
                    version: "1".into(),
                    roots: pool,
                    goals,
                    metrics: defs,
                    status_bands: StatusBands::default(),
                },
                values,
                order,
            }
        })
}

fn ancestors(model: &QualityModel, id: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::from([id.to_string()]);
    let mut current = id.to_string();
    while let Some(parent) = model.goals.values().find(|g| g.children.contains(&current)) {
        out.insert(parent.id.clone());
        current = parent.id.clone();
    }
    out
}

fn criterion_5() -> Result<String, String> {
    run_property(512, (score_instance(), any::<prop::sample::Index>(), 0.0f64..1.0), |(inst, pick, step)| {
        let model = &inst.model;
        prop_assert!(cloudhealth_core::validate_model(model).is_empty(), "{:?}", cloudhealth_core::validate_model(model));
        let all = GoalSelection::new(model.goals.keys().cloned());
        let base = compute_scores(model, &all, &inst.values, 0).unwrap();

        for (id, node) in &base.nodes {
            if let Some(s) = node.score {
                prop_assert!((0.0..=1.0).contains(&s), "{} scored {}", id, s);
            }
            prop_assert!((0.0..=1.0).contains(&node.confidence));
        }

        // every goal agrees with its combinator applied to its children
        for goal in model.goals.values() {
            let scored: Vec<(f64, f64)> = goal
                .children
                .iter()
                .zip(&goal.weights)
                .filter_map(|(c, w)| base.nodes[c].score.map(|s| (s, *w)))
                .collect();
            let expected = match goal.combinator {
                _ if scored.is_empty() => None,
                Combinator::WeightedMean => {
                    let wsum: f64 = scored.iter().map(|(_, w)| w).sum();
                    Some(scored.iter().map(|(s, w)| s * w).sum::<f64>() / wsum)
                }
                Combinator::Min => scored.iter().map(|(s, _)| *s).reduce(f64::min),
                Combinator::Max => scored.iter().map(|(s, _)| *s).reduce(f64::max),
            };
            match (base.nodes[&goal.id].score, expected) {
                (None, None) => {}
                (Some(got), Some(want)) => prop_assert!((got - want).abs() < 1e-12, "{}: {} vs {}", goal.id, got, want),
                (got, want) => prop_assert!(false, "{}: {:?} vs {:?}", goal.id, got, want),
            }
        }

        // selection order
        let reordered = GoalSelection::new(inst.order.iter().cloned());
        prop_assert_eq!(&compute_scores(model, &reordered, &inst.values, 0).unwrap(), &base);
        prop_assert_eq!(resolve_goals(model, &reordered).unwrap(), resolve_goals(model, &all).unwrap());

        // monotone improvement of one metric towards its ideal
        let metric_ids: Vec<&String> = model.metrics.keys().collect();
        let target = metric_ids[pick.index(metric_ids.len())].clone();
        if let Some(raw) = inst.values[&target] {
            let def = &model.metrics[&target];
            let improved = raw + (def.ideal() - raw) * step;
            let mut values = inst.values.clone();
            values.insert(target.clone(), Some(improved));
            let better = compute_scores(model, &all, &values, 0).unwrap();
            for (id, node) in &base.nodes {
                if let (Some(before), Some(after)) = (node.score, better.nodes[id].score) {
                    prop_assert!(after >= before - 1e-12, "{} dropped {} -> {}", id, before, after);
                }
            }
        }

        // removing one metric's data touches only its ancestor chain
        let mut values = inst.values.clone();
        values.insert(target.clone(), None);
        let without = compute_scores(model, &all, &values, 0).unwrap();
        let chain = ancestors(model, &target);
        for (id, node) in &base.nodes {
            if !chain.contains(id) {
                prop_assert_eq!(&without.nodes[id], node, "{} changed", id);
            }
        }
        Ok(())
    })?;
    Ok("512 random models".into())
}

// ---------------------------------------------------------------------------
// Criterion 6

const RETENTION_S: u64 = 120;
const NOW: i64 = 1_000_000;

fn brute_force(samples: &[(i64, f64)], window_s: u64, stat: Statistic) -> Option<f64> {
    let retained: Vec<(i64, f64)> = samples
        .iter()
        .copied()
        .filter(|&(ts, _)| ts >= NOW - RETENTION_S as i64 * 1000 && ts <= NOW + CLOCK_SKEW_MS)
        .collect();
    let window: Vec<(i64, f64)> = retained
        .into_iter()
        .filter(|&(ts, _)| ts > NOW - window_s as i64 * 1000 && ts <= NOW)
        .collect();
    if window.is_empty() {
        return None;
    }
    let n = window.len();
    let mut values: Vec<f64> = window.iter().map(|&(_, v)| v).collect();
    Some(match stat {
        Statistic::Mean => values.iter().sum::<f64>() / n as f64,
        Statistic::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Statistic::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Statistic::P95 => {
            values.sort_by(f64::total_cmp);
            let rank = (95 * n).div_ceil(100);
            values[rank - 1]
        }
        Statistic::Rate => n as f64 / window_s as f64,
        Statistic::Last => {
            // latest timestamp; equal timestamps resolve to the largest value
            let last_ts = window.iter().map(|&(ts, _)| ts).max().unwrap();
            window
                .iter()
                .filter(|&&(ts, _)| ts == last_ts)
                .map(|&(_, v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        }
    })
}

fn criterion_6() -> Result<String, String> {
    let stats = [
        Statistic::Mean,
        Statistic::Min,
        Statistic::Max,
        Statistic::P95,
        Statistic::Rate,
        Statistic::Last,
    ];
    let horizon = RETENTION_S as i64 * 1000;
    let sample = (
        0usize..2,
        // coarse timestamps force ties
        (-(horizon + 20_000) / 500..(CLOCK_SKEW_MS + 5_000) / 500).prop_map(|t| NOW + t * 500),
        -1000.0f64..1000.0,
    );
    let strategy = (prop::collection::vec(sample, 0..400), any::<u64>());
    run_property(256, strategy, |(raw, shuffle_seed)| {
        let components = ["x", "y"];
        let samples: Vec<Sample> = raw
            .iter()
            .map(|&(c, ts, v)| Sample::new("a", components[c], ts, v))
            .collect();
        let store_of = |order: &[Sample]| {
            let mut s = SeriesStore::new(RETENTION_S, ["a".to_string()], components.map(String::from));
            for x in order {
                let _ = s.ingest_sample(x, NOW);
            }
            s
        };
        let store = store_of(&samples);
        let mut shuffled = samples.clone();
        {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
        }
        let other = store_of(&shuffled);

        for (ci, c) in components.iter().enumerate() {
            let series: Vec<(i64, f64)> = raw
                .iter()
                .filter(|&&(rc, _, _)| rc == ci)
                .map(|&(_, ts, v)| (ts, v))
                .collect();
            prop_assert_eq!(
                store.query("a", c, i64::MIN, i64::MAX),
                other.query("a", c, i64::MIN, i64::MAX)
            );
            for window in [1u64, 7, 30, 60, 120, 600] {
                for stat in stats {
                    let got = store.window_aggregate("a", c, window, stat, NOW).unwrap();
                    let got_other = other.window_aggregate("a", c, window, stat, NOW).unwrap();
                    prop_assert_eq!(got.map(f64::to_bits), got_other.map(f64::to_bits));
                    let want = brute_force(&series, window, stat);
                    match (got, want) {
                        (None, None) => {}
                        (Some(g), Some(w)) => {
                            let tol = 1e-9 * w.abs().max(1.0);
                            prop_assert!((g - w).abs() <= tol, "{:?} w={} got {} want {}", stat, window, g, w);
                        }
                        _ => prop_assert!(false, "{:?} w={} got {:?} want {:?}", stat, window, got, want),
                    }
                }
            }
        }
        Ok(())
    })?;
    Ok("256 random sample sets, 6 statistics x 6 windows".into())
}

// ---------------------------------------------------------------------------
// Criterion 7

fn trajectory(seed: u64) -> Vec<cloudhealth_core::sim::SimSnapshot> {
    let mut sim = Simulation::new(SimConfig {
        seed,
        ..SimConfig::default()
    })
    .unwrap();
    for (kind, component, start, magnitude) in [
        (FaultKind::Downtime, "meter_aggregator", 100, 0.0),
        (FaultKind::LatencySpike, "energy_optimizer", 300, 4.0),
        (FaultKind::DropRate, "actuator_gateway", 600, 0.5),
    ] {
        sim.inject_fault(FaultSpec {
            kind,
            component_id: component.into(),
            start_tick: start,
            duration_ticks: 50,
            magnitude,
        })
        .unwrap();
    }
    (0..1000)
        .map(|_| {
            let snap = sim.snapshot();
            sim.step();
            snap
        })
        .collect()
}

fn criterion_7() -> Result<String, String> {
    let a = trajectory(42);
    let b = trajectory(42);
    if a != b {
        let tick = a.iter().zip(&b).position(|(x, y)| x != y);
        return Err(format!("seed 42 trajectories diverge at tick {tick:?}"));
    }
    let as_text = |t: &[cloudhealth_core::sim::SimSnapshot]| serde_json::to_string(t).unwrap();
    if as_text(&a) != as_text(&b) {
        return Err("serialised trajectories differ".into());
    }
    if trajectory(43) == a {
        return Err("seed has no effect on the trajectory".into());
    }

    let run = || {
        let out = Command::new(BIN)
            .arg("plan")
            .args(shipped_inputs())
            .args(["--goals", "reliability,performance"])
            .output()
            .unwrap();
        (out.status.success(), out.stdout)
    };
    let (ok1, first) = run();
    let (ok2, second) = run();
    if !(ok1 && ok2) {
        return Err("cloudhealth plan failed".into());
    }
    if first != second {
        return Err("cloudhealth plan output differs between runs".into());
    }
    Ok(format!(
        "1000 ticks x {} components identical; plan output {} bytes identical",
        a[0].components.len(),
        first.len()
    ))
}

// ---------------------------------------------------------------------------

struct Criterion {
    number: u32,
    title: &'static str,
    budget: Duration,
    run: fn() -> Result<String, String>,
}

fn main() {
    let criteria = [
        Criterion { number: 1, title: "reliability decomposition", budget: Duration::from_secs(1), run: criterion_1 },
        Criterion { number: 2, title: "configure, deploy, operate end to end", budget: Duration::from_secs(30), run: criterion_2 },
        Criterion { number: 3, title: "cover soundness and greedy quality", budget: Duration::from_secs(60), run: criterion_3 },
        Criterion { number: 4, title: "reconciliation idempotence and convergence", budget: Duration::from_secs(30), run: criterion_4 },
        Criterion { number: 5, title: "score algebra", budget: Duration::from_secs(30), run: criterion_5 },
        Criterion { number: 6, title: "pipeline correctness", budget: Duration::from_secs(30), run: criterion_6 },
        Criterion { number: 7, title: "determinism", budget: Duration::from_secs(10), run: criterion_7 },
    ];

    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        let name = format!("criterion {} {}", c.number, c.title);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!(
                "took {:.1} s, budget {} s ({detail})",
                elapsed.as_secs_f64(),
                c.budget.as_secs()
            )),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({:.2} s): {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name} ({:.2} s): {why}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
