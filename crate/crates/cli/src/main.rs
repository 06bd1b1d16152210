use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cloudhealth_core::catalog::{load_catalog, match_probes, ProbeDescriptor};
use cloudhealth_core::defaults::{DEFAULT_CATALOG, DEFAULT_MODEL, MICROGRID_ARCHITECTURE};
use cloudhealth_core::model::{check_model_text, parse_model, resolve_goals, GoalSelection};
use cloudhealth_core::{load_architecture, ArchitectureDescriptor, QualityModel};

mod probe_http;
mod server;

#[derive(Parser)]
#[command(name = "cloudhealth", version, about = "Model-driven monitoring orchestrator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Check a model (and optionally an architecture and catalog) for errors.
    Validate(ValidateArgs),
    /// Print the probe plan for a goal selection without deploying it.
    Plan(PlanArgs),
    /// HTTP reachability probe; configured through the environment by the
    /// local process executor.
    ProbeHttp,
}

/// Input files. Omitted paths fall back to the shipped defaults.
#[derive(Args, Clone)]
struct Inputs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    architecture: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Overridden by CLOUDHEALTH_LISTEN.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Run the micro-grid simulator and drive simulated probes from it.
    #[arg(long)]
    sim: bool,
    #[arg(long, default_value_t = 42)]
    sim_seed: u64,
    /// Simulated milliseconds per wall-clock millisecond.
    #[arg(long, default_value_t = 1.0)]
    sim_speedup: f64,
    /// JSON array of faults injected when the simulator starts.
    #[arg(long)]
    fault_schedule: Option<PathBuf>,
    /// Append every accepted sample to this NDJSON file.
    #[arg(long)]
    sample_log: Option<PathBuf>,
    /// Static files served at `/`.
    #[arg(long)]
    dashboard_dir: Option<PathBuf>,
    #[arg(long, default_value_t = cloudhealth_core::deploy::DEFAULT_HEARTBEAT_TIMEOUT_SECONDS)]
    heartbeat_timeout: u64,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    architecture: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Comma separated goal ids.
    #[arg(long, value_delimiter = ',', required = true)]
    goals: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(args) => serve(args),
        Command::Validate(args) => validate(args),
        Command::Plan(args) => plan(args),
        Command::ProbeHttp => probe_http::run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_or(path: Option<&Path>, default: &str) -> Result<String> {
    path.map_or_else(|| Ok(default.to_string()), read)
}

impl Inputs {
    fn load(&self) -> Result<(QualityModel, ArchitectureDescriptor, Vec<ProbeDescriptor>)> {
        let model = parse_model(&read_or(self.model.as_deref(), DEFAULT_MODEL)?)
            .context("loading model")?;
        let arch = load_architecture(&read_or(
            self.architecture.as_deref(),
            MICROGRID_ARCHITECTURE,
        )?)
        .context("loading architecture")?;
        let catalog = load_catalog(&read_or(self.catalog.as_deref(), DEFAULT_CATALOG)?)
            .context("loading catalog")?;
        Ok((model, arch, catalog))
    }
}

fn validate(args: ValidateArgs) -> Result<ExitCode> {
    let mut problems = Vec::new();
    match check_model_text(&read(&args.model)?) {
        Ok(violations) => {
            for v in violations {
                problems.push(format!("model: {}: {v}", v.rule()));
            }
        }
        Err(e) => problems.push(format!("model: {e}")),
    }
    if let Some(path) = &args.architecture {
        if let Err(e) = load_architecture(&read(path)?) {
            problems.push(format!("architecture: {e}"));
        }
    }
    if let Some(path) = &args.catalog {
        if let Err(e) = load_catalog(&read(path)?) {
            problems.push(format!("catalog: {e}"));
        }
    }
    if problems.is_empty() {
        println!("ok");
        return Ok(ExitCode::SUCCESS);
    }
    for p in &problems {
        println!("{p}");
    }
    Ok(ExitCode::FAILURE)
}

fn plan(args: PlanArgs) -> Result<ExitCode> {
    let (model, arch, catalog) = args.inputs.load()?;
    let selection = GoalSelection::new(args.goals.iter().map(|g| g.trim().to_string()));
    if selection.is_empty() {
        bail!("no goals given");
    }
    let metrics = resolve_goals(&model, &selection)?;
    let plan = match_probes(&metrics, &arch, &catalog)?;
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&plan)?);
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    let (model, arch, catalog) = args.inputs.load()?;
    let listen = std::env::var("CLOUDHEALTH_LISTEN").unwrap_or(args.listen);
    let addr: SocketAddr = listen
        .parse()
        .with_context(|| format!("invalid listen address `{listen}`"))?;
    let faults = match &args.fault_schedule {
        Some(path) => cloudhealth_core::sim::load_fault_schedule(&read(path)?)
            .context("loading fault schedule")?,
        None => Vec::new(),
    };

    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let config = server::ServeConfig {
        addr,
        sim: args.sim.then(|| cloudhealth_core::SimConfig {
            seed: args.sim_seed,
            speedup: args.sim_speedup,
            start_ms: cloudhealth_core::clock::wall_ms(),
            ..Default::default()
        }),
        faults,
        sample_log: args.sample_log,
        dashboard_dir: args.dashboard_dir,
        heartbeat_timeout_seconds: args.heartbeat_timeout,
    };
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(server::run(model, arch, catalog, config))?;
    Ok(ExitCode::SUCCESS)
}
