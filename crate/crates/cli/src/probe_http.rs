//! `cloudhealth probe-http`: polls an HTTP target and pushes uptime and
//! latency samples to the ingest endpoint.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use cloudhealth_core::clock::wall_ms;
use cloudhealth_core::Sample;

// Give up once the orchestrator has been unreachable this many rounds in a row.
const MAX_INGEST_FAILURES: u32 = 10;

fn env(name: &str) -> Result<String> {
    std::env::var(name).with_context(|| format!("{name} is not set"))
}

pub fn run() -> Result<ExitCode> {
    let component = env("COMPONENT_ID")?;
    let target = env("TARGET")?;
    let ingest_url = env("INGEST_URL")?;
    let interval: u64 = env("INTERVAL_SECONDS")?
        .parse()
        .context("INTERVAL_SECONDS is not an integer")?;
    let metrics = std::env::var("METRICS").unwrap_or_else(|_| "uptime_ratio,latency_ms".into());
    let metrics: Vec<&str> = metrics.split(',').filter(|m| !m.is_empty()).collect();

    let url = if target.contains("://") {
        target.clone()
    } else {
        format!("http://{target}/")
    };
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(interval.clamp(1, 10)))
        .build()?;

    let mut ingest_failures = 0;
    loop {
        let started = Instant::now();
        let reachable = client.get(&url).send().is_ok_and(|r| !r.status().is_server_error());
        let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
        let ts = wall_ms();

        let mut body = String::new();
        for metric in &metrics {
            let value = match *metric {
                "uptime_ratio" => Some(if reachable { 1.0 } else { 0.0 }),
                "latency_ms" | "response_time_ms" => reachable.then_some(elapsed_ms),
                _ => None,
            };
            if let Some(value) = value {
                body.push_str(&Sample::new(*metric, component.as_str(), ts, value).to_line());
                body.push('\n');
            }
        }

        let pushed = client
            .post(&ingest_url)
            .body(body)
            .send()
            .is_ok_and(|r| r.status().is_success());
        if pushed {
            ingest_failures = 0;
        } else {
            ingest_failures += 1;
            if ingest_failures >= MAX_INGEST_FAILURES {
                eprintln!("probe-http: ingest endpoint unreachable, exiting");
                return Ok(ExitCode::FAILURE);
            }
        }

        let period = Duration::from_secs(interval.max(1));
        std::thread::sleep(period.saturating_sub(started.elapsed()));
    }
}
