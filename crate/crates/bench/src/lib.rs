//! Synthetic inputs shared by the benchmarks.

use cloudhealth_core::defaults::{DEFAULT_CATALOG, DEFAULT_MODEL, MICROGRID_ARCHITECTURE};
use cloudhealth_core::{load_architecture, load_catalog, parse_model, ArchitectureDescriptor};
use cloudhealth_core::{ProbeDescriptor, QualityModel, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn default_inputs() -> (QualityModel, ArchitectureDescriptor, Vec<ProbeDescriptor>) {
    (
        parse_model(DEFAULT_MODEL).unwrap(),
        load_architecture(MICROGRID_ARCHITECTURE).unwrap(),
        load_catalog(DEFAULT_CATALOG).unwrap(),
    )
}

/// The shipped micro-grid with its components cloned `copies` times.
pub fn scaled_architecture(copies: usize) -> ArchitectureDescriptor {
    let base = load_architecture(MICROGRID_ARCHITECTURE).unwrap();
    let mut arch = base.clone();
    arch.components.clear();
    for i in 0..copies {
        for c in &base.components {
            let mut c = c.clone();
            c.id = format!("{}_{i}", c.id);
            c.parent = c.parent.map(|p| format!("{p}_{i}"));
            arch.components.push(c);
        }
    }
    arch
}

/// `n` samples spread over `components` series of one metric, timestamps
/// jittered across the `span_ms` before `now`.
pub fn samples(n: usize, components: usize, span_ms: i64, now: i64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|i| {
            let ts = now - span_ms + (i as i64 * span_ms) / n as i64 + rng.random_range(0..50);
            Sample::new(
                "latency_ms",
                format!("c{}", i % components),
                ts.min(now),
                rng.random_range(1.0..500.0),
            )
        })
        .collect()
}
