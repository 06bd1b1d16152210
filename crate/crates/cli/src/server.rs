//! HTTP surface of the orchestrator.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use cloudhealth_core::catalog::ProbeDescriptor;
use cloudhealth_core::runtime::{start_simulation, FaultRequest, RuntimeOptions};
use cloudhealth_core::sim::FaultSpec;
use cloudhealth_core::{
    ArchitectureDescriptor, QualityModel, Runtime, RuntimeError, SharedRuntime, SimConfig, View,
};

pub struct ServeConfig {
    pub addr: SocketAddr,
    pub sim: Option<SimConfig>,
    pub faults: Vec<FaultSpec>,
    pub sample_log: Option<PathBuf>,
    pub dashboard_dir: Option<PathBuf>,
    pub heartbeat_timeout_seconds: u64,
}

#[derive(Clone)]
pub struct AppState {
    pub runtime: SharedRuntime,
    pub dashboard_dir: Option<Arc<PathBuf>>,
}

pub struct ApiError(RuntimeError);

impl From<RuntimeError> for ApiError {
    fn from(e: RuntimeError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, detail) = match &self.0 {
            RuntimeError::UnknownGoal(id) => (StatusCode::BAD_REQUEST, "UnknownGoal", json!(id)),
            RuntimeError::EmptySelection => (StatusCode::CONFLICT, "EmptySelection", json!(null)),
            RuntimeError::UncoveredMetrics(m) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "UncoveredMetrics", json!(m))
            }
            RuntimeError::Plan(_) => (StatusCode::UNPROCESSABLE_ENTITY, "UnresolvableConfig", json!(null)),
            RuntimeError::Deploy(_) => (StatusCode::INTERNAL_SERVER_ERROR, "DeployError", json!(null)),
            RuntimeError::SimDisabled => (StatusCode::CONFLICT, "SimDisabled", json!(null)),
            RuntimeError::UnknownComponent(c) => {
                (StatusCode::NOT_FOUND, "UnknownComponent", json!(c))
            }
            RuntimeError::UnknownMetric(m) => (StatusCode::NOT_FOUND, "UnknownMetric", json!(m)),
            RuntimeError::InvalidFault(_) => (StatusCode::BAD_REQUEST, "InvalidFault", json!(null)),
            RuntimeError::Sim(_) => (StatusCode::BAD_REQUEST, "SimError", json!(null)),
        };
        let body = json!({ "error": code, "message": self.0.to_string(), "detail": detail });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/model", get(model))
        .route("/goals", get(goals))
        .route("/selection", get(get_selection).put(put_selection))
        .route("/deploy", post(deploy))
        .route("/kpis", get(kpis))
        .route("/probes", get(probes))
        .route("/series", get(series))
        .route("/ingest", post(ingest))
        .route("/sim", get(sim_status))
        .route("/sim/faults", post(inject_fault))
        .fallback(get(static_files))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(s.runtime.lock().model().to_json())
}

async fn goals(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.runtime.lock().goals())
}

async fn get_selection(State(s): State<AppState>) -> Json<Vec<String>> {
    Json(s.runtime.lock().selection().goal_ids.iter().cloned().collect())
}

async fn put_selection(
    State(s): State<AppState>,
    Json(ids): Json<Vec<String>>,
) -> ApiResult<Json<Vec<String>>> {
    let mut rt = s.runtime.lock();
    let selection = rt.configure_selection(&ids)?;
    Ok(Json(selection.goal_ids.iter().cloned().collect()))
}

async fn deploy(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    let summary = s.runtime.lock().trigger_deploy()?;
    Ok(Json(summary))
}

#[derive(Deserialize)]
struct KpiQuery {
    #[serde(default)]
    view: View,
}

async fn kpis(State(s): State<AppState>, Query(q): Query<KpiQuery>) -> impl IntoResponse {
    Json(s.runtime.lock().kpis(q.view))
}

async fn probes(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.runtime.lock().probes())
}

#[derive(Deserialize)]
struct SeriesQuery {
    metric: String,
    component: String,
    from: Option<i64>,
    to: Option<i64>,
}

async fn series(State(s): State<AppState>, Query(q): Query<SeriesQuery>) -> ApiResult<impl IntoResponse> {
    let samples = s
        .runtime
        .lock()
        .series(&q.metric, &q.component, q.from, q.to)?;
    Ok(Json(samples))
}

async fn ingest(State(s): State<AppState>, body: Bytes) -> impl IntoResponse {
    let text = String::from_utf8_lossy(&body);
    let summary = s.runtime.lock().ingest_body(&text);
    (StatusCode::ACCEPTED, Json(summary))
}

async fn sim_status(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    let status = s.runtime.lock().sim_status().ok_or(RuntimeError::SimDisabled)?;
    Ok(Json(status))
}

async fn inject_fault(
    State(s): State<AppState>,
    Json(request): Json<FaultRequest>,
) -> ApiResult<impl IntoResponse> {
    let accepted = s.runtime.lock().inject_fault(request)?;
    Ok((StatusCode::CREATED, Json(accepted)))
}

const PLACEHOLDER: &str = "<!doctype html>
<html><head><meta charset=\"utf-8\"><title>cloudhealth</title></head>
<body><h1>cloudhealth</h1>
<p>No dashboard is installed. Start the service with <code>--dashboard-dir</code> to serve one.</p>
<ul><li><a href=\"/model\">/model</a></li><li><a href=\"/selection\">/selection</a></li>
<li><a href=\"/kpis?view=manager\">/kpis?view=manager</a></li><li><a href=\"/probes\">/probes</a></li></ul>
</body></html>
";

async fn static_files(State(s): State<AppState>, uri: Uri) -> Response {
    let Some(root) = s.dashboard_dir.as_deref() else {
        return if uri.path() == "/" {
            Html(PLACEHOLDER).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let Some(path) = safe_join(root, rel) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    rel.components()
        .all(|c| matches!(c, Component::Normal(_)))
        .then(|| root.join(rel))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

pub async fn run(
    model: QualityModel,
    architecture: ArchitectureDescriptor,
    catalog: Vec<ProbeDescriptor>,
    config: ServeConfig,
) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .with_context(|| format!("binding {}", config.addr))?;
    let bound = listener.local_addr()?;
    let ingest_host = if bound.ip().is_unspecified() {
        SocketAddr::from(([127, 0, 0, 1], bound.port()))
    } else {
        bound
    };

    let options = RuntimeOptions {
        heartbeat_timeout_seconds: config.heartbeat_timeout_seconds,
        ingest_url: format!("http://{ingest_host}/ingest"),
        self_exe: std::env::current_exe().ok(),
        sample_log: config.sample_log,
        ..Default::default()
    };
    let runtime = Runtime::new(model, architecture, catalog, options)
        .context("opening sample log")?
        .shared();

    let sim = match config.sim {
        Some(sim_config) => Some(start_simulation(&runtime, sim_config, config.faults)?),
        None => None,
    };
    if sim.is_none() {
        // Without a simulator nothing ticks, so supervise on a timer.
        let rt = Arc::downgrade(&runtime);
        tokio::spawn(async move {
            let mut every = tokio::time::interval(Duration::from_secs(1));
            loop {
                every.tick().await;
                let Some(rt) = rt.upgrade() else { break };
                let mut rt = rt.lock();
                let now = rt.now_ms();
                rt.maintain(now);
            }
        });
    }

    let state = AppState {
        runtime: runtime.clone(),
        dashboard_dir: config.dashboard_dir.map(Arc::new),
    };
    println!("listening on http://{bound}");
    tracing::info!(%bound, sim = sim.is_some(), "service started");

    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await?;

    runtime.lock().shutdown();
    if let Some(sim) = sim {
        sim.stop();
    }
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) =
            tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
        {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
