//! Discrete-tick micro-grid simulator.
//!
//! Every component draws its noise from its own seeded stream, so the
//! trajectory of one component never depends on what happens to another.
//! Faults only transform observations; they never consume randomness.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architecture::{ArchitectureDescriptor, Layer};

pub const EDGE_LATENCY_MS: f64 = 20.0;
pub const PLATFORM_LATENCY_MS: f64 = 35.0;
pub const APPLICATION_LATENCY_MS: f64 = 50.0;
pub const BASELINE_RATE_RPS: f64 = 10.0;
/// Average draw of one metered premise, kW.
pub const METER_LOAD_KW: f64 = 0.5;
/// Half-width of the uniform multiplicative noise band.
pub const NOISE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Up,
    RequestLatencyMs,
    ServedRequestsPerS,
    EnergyReadingKwh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimComponent {
    pub id: String,
    pub layer: Layer,
}

impl SimComponent {
    pub fn new(id: impl Into<String>, layer: Layer) -> Self {
        Self {
            id: id.into(),
            layer,
        }
    }

    pub fn supports(&self, signal: Signal) -> bool {
        match signal {
            Signal::Up => true,
            Signal::EnergyReadingKwh => self.layer == Layer::Device,
            Signal::RequestLatencyMs | Signal::ServedRequestsPerS => self.layer != Layer::Device,
        }
    }

    fn baseline_latency(&self) -> f64 {
        match self.layer {
            Layer::Edge => EDGE_LATENCY_MS,
            Layer::Platform => PLATFORM_LATENCY_MS,
            Layer::Application | Layer::Device => APPLICATION_LATENCY_MS,
        }
    }
}

/// The roster mirrored by `arch/microgrid.json`.
pub fn microgrid_roster() -> Vec<SimComponent> {
    vec![
        SimComponent::new("meter_1", Layer::Device),
        SimComponent::new("meter_2", Layer::Device),
        SimComponent::new("meter_3", Layer::Device),
        SimComponent::new("meter_aggregator", Layer::Edge),
        SimComponent::new("energy_optimizer", Layer::Application),
        SimComponent::new("actuator_gateway", Layer::Application),
    ]
}

pub fn roster_from_architecture(arch: &ArchitectureDescriptor) -> Vec<SimComponent> {
    arch.components
        .iter()
        .map(|c| SimComponent::new(c.id.clone(), c.layer))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub tick_ms: u64,
    pub speedup: f64,
    /// Epoch milliseconds of tick 0.
    #[serde(default)]
    pub start_ms: i64,
    #[serde(default = "microgrid_roster")]
    pub components: Vec<SimComponent>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tick_ms: 1000,
            speedup: 1.0,
            start_ms: 0,
            components: microgrid_roster(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Downtime,
    LatencySpike,
    DropRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub component_id: String,
    pub start_tick: u64,
    pub duration_ticks: u64,
    #[serde(default)]
    pub magnitude: f64,
}

impl FaultSpec {
    pub fn active_at(&self, tick: u64) -> bool {
        tick >= self.start_tick && tick < self.start_tick.saturating_add(self.duration_ticks)
    }

    pub fn end_tick(&self) -> u64 {
        self.start_tick.saturating_add(self.duration_ticks)
    }
}

pub type FaultId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("component `{component}` does not expose {signal:?}")]
    UnsupportedSignal { component: String, signal: Signal },
    #[error("invalid fault: {0}")]
    InvalidFault(String),
}

#[derive(Debug, Clone)]
struct ComponentState {
    spec: SimComponent,
    rng: ChaCha8Rng,
    latency_noise: f64,
    rate_noise: f64,
    energy_kwh: f64,
}

impl ComponentState {
    fn draw(&mut self, tick_ms: u64) {
        self.latency_noise = 1.0 + self.rng.random_range(-NOISE..=NOISE);
        self.rate_noise = 1.0 + self.rng.random_range(-NOISE..=NOISE);
        let load = METER_LOAD_KW * (1.0 + self.rng.random_range(-NOISE..=NOISE));
        self.energy_kwh += load * tick_ms as f64 / 3_600_000.0;
    }
}

/// Signals of one component at one tick. Unsupported signals are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub up: f64,
    pub request_latency_ms: Option<f64>,
    pub served_requests_per_s: Option<f64>,
    pub energy_reading_kwh: Option<f64>,
}

impl Observation {
    pub fn is_up(&self) -> bool {
        self.up > 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSnapshot {
    pub tick: u64,
    pub now_ms: i64,
    pub components: BTreeMap<String, Observation>,
}

/// The simulation state machine. Advances only when [`Simulation::step`] is
/// called; [`SimHandle`] drives it in real time.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    tick: u64,
    components: Vec<ComponentState>,
    faults: Vec<(FaultId, FaultSpec)>,
    next_fault: FaultId,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        if config.tick_ms < 1 {
            return Err(SimError::InvalidConfig("tick_ms must be >= 1".into()));
        }
        if !(config.speedup.is_finite() && config.speedup > 0.0) {
            return Err(SimError::InvalidConfig("speedup must be > 0".into()));
        }
        let mut components = Vec::with_capacity(config.components.len());
        for (i, spec) in config.components.iter().enumerate() {
            if config.components[..i].iter().any(|c| c.id == spec.id) {
                return Err(SimError::InvalidConfig(format!(
                    "duplicate component `{}`",
                    spec.id
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let mut state = ComponentState {
                spec: spec.clone(),
                rng,
                latency_noise: 1.0,
                rate_noise: 1.0,
                energy_kwh: 0.0,
            };
            state.draw(config.tick_ms);
            components.push(state);
        }
        Ok(Self {
            config,
            tick: 0,
            components,
            faults: Vec::new(),
            next_fault: 1,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn now_ms(&self) -> i64 {
        self.config.start_ms + (self.tick * self.config.tick_ms) as i64
    }

    pub fn step(&mut self) {
        self.tick += 1;
        let tick_ms = self.config.tick_ms;
        for c in &mut self.components {
            c.draw(tick_ms);
        }
    }

    pub fn run(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.step();
        }
    }

    pub fn faults(&self) -> &[(FaultId, FaultSpec)] {
        &self.faults
    }

    pub fn component_ids(&self) -> impl Iterator<Item = &str> {
        self.components.iter().map(|c| c.spec.id.as_str())
    }

    pub fn components(&self) -> impl Iterator<Item = &SimComponent> {
        self.components.iter().map(|c| &c.spec)
    }

    pub fn inject_fault(&mut self, fault: FaultSpec) -> Result<FaultId, SimError> {
        if !self.components.iter().any(|c| c.spec.id == fault.component_id) {
            return Err(SimError::UnknownComponent(fault.component_id));
        }
        if fault.duration_ticks < 1 {
            return Err(SimError::InvalidFault("duration_ticks must be >= 1".into()));
        }
        if fault.start_tick < self.tick {
            return Err(SimError::InvalidFault(format!(
                "start_tick {} is in the past (current tick {})",
                fault.start_tick, self.tick
            )));
        }
        match fault.kind {
            FaultKind::Downtime => {}
            FaultKind::LatencySpike => {
                if !(fault.magnitude.is_finite() && fault.magnitude >= 1.0) {
                    return Err(SimError::InvalidFault(
                        "latency_spike magnitude must be >= 1".into(),
                    ));
                }
            }
            FaultKind::DropRate => {
                if !(0.0..=1.0).contains(&fault.magnitude) {
                    return Err(SimError::InvalidFault(
                        "drop_rate magnitude must be in [0, 1]".into(),
                    ));
                }
            }
        }
        let id = self.next_fault;
        self.next_fault += 1;
        self.faults.push((id, fault));
        Ok(id)
    }

    fn active_faults<'a>(&'a self, component: &'a str) -> impl Iterator<Item = &'a FaultSpec> + 'a {
        self.faults
            .iter()
            .map(|(_, f)| f)
            .filter(move |f| f.component_id == component && f.active_at(self.tick))
    }

    fn observation(&self, c: &ComponentState) -> Observation {
        let mut down = false;
        let mut spike = 1.0;
        let mut keep = 1.0;
        for f in self.active_faults(&c.spec.id) {
            match f.kind {
                FaultKind::Downtime => down = true,
                FaultKind::LatencySpike => spike *= f.magnitude,
                FaultKind::DropRate => keep *= 1.0 - f.magnitude,
            }
        }
        let serves = c.spec.supports(Signal::RequestLatencyMs);
        Observation {
            up: if down { 0.0 } else { 1.0 },
            request_latency_ms: serves.then(|| c.spec.baseline_latency() * c.latency_noise * spike),
            served_requests_per_s: serves.then_some(if down {
                0.0
            } else {
                BASELINE_RATE_RPS * c.rate_noise * keep
            }),
            energy_reading_kwh: c
                .spec
                .supports(Signal::EnergyReadingKwh)
                .then_some(c.energy_kwh),
        }
    }

    pub fn observe(&self, component: &str, signal: Signal) -> Result<f64, SimError> {
        let c = self
            .components
            .iter()
            .find(|c| c.spec.id == component)
            .ok_or_else(|| SimError::UnknownComponent(component.to_string()))?;
        let obs = self.observation(c);
        let value = match signal {
            Signal::Up => Some(obs.up),
            Signal::RequestLatencyMs => obs.request_latency_ms,
            Signal::ServedRequestsPerS => obs.served_requests_per_s,
            Signal::EnergyReadingKwh => obs.energy_reading_kwh,
        };
        value.ok_or(SimError::UnsupportedSignal {
            component: component.to_string(),
            signal,
        })
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            tick: self.tick,
            now_ms: self.now_ms(),
            components: self
                .components
                .iter()
                .map(|c| (c.spec.id.clone(), self.observation(c)))
                .collect(),
        }
    }
}

pub type TickListener = Box<dyn FnMut(&SimSnapshot) + Send>;

/// A simulation advanced in real time by a background thread at
/// `speedup` simulated milliseconds per wall millisecond.
pub struct SimHandle {
    sim: Arc<Mutex<Simulation>>,
    stop: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

pub fn start_sim(config: SimConfig) -> Result<SimHandle, SimError> {
    start_sim_with_listener(config, None)
}

/// Start the ticking thread. `listener` runs after every tick, outside the
/// simulation lock, with that tick's snapshot.
pub fn start_sim_with_listener(
    config: SimConfig,
    mut listener: Option<TickListener>,
) -> Result<SimHandle, SimError> {
    let sim = Arc::new(Mutex::new(Simulation::new(config.clone())?));
    let stop = Arc::new(AtomicBool::new(false));
    let tick_wall = Duration::from_secs_f64(config.tick_ms as f64 / 1000.0 / config.speedup);

    let thread = {
        let sim = Arc::clone(&sim);
        let stop = Arc::clone(&stop);
        std::thread::Builder::new()
            .name("microgrid-sim".into())
            .spawn(move || {
                let started = Instant::now();
                while !stop.load(Ordering::Relaxed) {
                    let due = (started.elapsed().as_secs_f64() / tick_wall.as_secs_f64()) as u64;
                    loop {
                        let snapshot = {
                            let mut s = sim.lock();
                            if s.tick() >= due {
                                break;
                            }
                            s.step();
                            s.snapshot()
                        };
                        if let Some(l) = listener.as_mut() {
                            l(&snapshot);
                        }
                        if stop.load(Ordering::Relaxed) {
                            return;
                        }
                    }
                    let next = tick_wall.mul_f64((due + 1) as f64);
                    let wait = next.saturating_sub(started.elapsed());
                    std::thread::sleep(wait.clamp(Duration::from_micros(200), Duration::from_millis(50)));
                }
            })
            .map_err(|e| SimError::InvalidConfig(format!("cannot spawn simulator thread: {e}")))?
    };

    Ok(SimHandle {
        sim,
        stop,
        thread: Mutex::new(Some(thread)),
    })
}

impl SimHandle {
    pub fn observe(&self, component: &str, signal: Signal) -> Result<f64, SimError> {
        self.sim.lock().observe(component, signal)
    }

    pub fn inject_fault(&self, fault: FaultSpec) -> Result<FaultId, SimError> {
        self.sim.lock().inject_fault(fault)
    }

    pub fn snapshot(&self) -> SimSnapshot {
        self.sim.lock().snapshot()
    }

    pub fn tick(&self) -> u64 {
        self.sim.lock().tick()
    }

    pub fn now_ms(&self) -> i64 {
        self.sim.lock().now_ms()
    }

    pub fn config(&self) -> SimConfig {
        self.sim.lock().config().clone()
    }

    pub fn faults(&self) -> Vec<(FaultId, FaultSpec)> {
        self.sim.lock().faults().to_vec()
    }

    pub fn components(&self) -> Vec<SimComponent> {
        self.sim.lock().components().cloned().collect()
    }

    /// Stop the ticking thread. Safe to call more than once.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
        let Some(t) = self.thread.lock().take() else {
            return;
        };
        // The last owner may be dropped from inside a tick listener.
        if t.thread().id() != std::thread::current().id() {
            let _ = t.join();
        }
    }

    /// Ask the ticking thread to exit without waiting for it.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    pub fn is_running(&self) -> bool {
        !self.stop.load(Ordering::Relaxed)
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Parse an optional fault schedule file: a JSON array of fault specs.
pub fn load_fault_schedule(text: &str) -> Result<Vec<FaultSpec>, serde_json::Error> {
    serde_json::from_str(text)
}
