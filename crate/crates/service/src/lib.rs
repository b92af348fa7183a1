//! JSON-over-HTTP front end for training runs: start runs, follow their
//! metrics and preferred set, and answer annotation tasks in human mode.

pub mod runs;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lope_core::annotator::Judgment;
use lope_core::config::TrainConfig;
use lope_core::env::EnvConfig;
use lope_core::rundir::RunDir;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::runs::{Run, SubmitError};

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ApiError::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_config"),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = ErrorBody {
            code: code.to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::BadRequest(r.body_text())
    }
}

/// Registry of runs; optionally persists each run under `out_root/<id>`.
#[derive(Default)]
pub struct AppState {
    runs: Mutex<HashMap<String, Arc<Run>>>,
    out_root: Option<PathBuf>,
    counter: Mutex<u64>,
}

impl AppState {
    pub fn new(out_root: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            out_root,
            ..Self::default()
        })
    }

    pub fn get(&self, id: &str) -> Result<Arc<Run>, ApiError> {
        self.runs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown run '{id}'")))
    }

    /// Asks every run to stop at its next iteration boundary.
    pub fn stop_all(&self) {
        for run in self.runs.lock().unwrap_or_else(|e| e.into_inner()).values() {
            run.request_stop();
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    pub id: Option<String>,
    /// Partial configuration layered on the preset for its environment kind.
    #[serde(default)]
    pub config: Option<Value>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    /// Preferred-set version the judgments were made against.
    pub version: u64,
    pub outcomes: Vec<Judgment>,
}

#[derive(Debug, Deserialize, Serialize, PartialEq)]
pub struct SubmitAck {
    pub task: String,
    pub accepted: usize,
    pub remaining: usize,
}

#[derive(Debug, Deserialize)]
pub struct SinceQuery {
    pub since: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MapPayload {
    Grid {
        width: i32,
        height: i32,
        /// ASCII rows, `#` for walls.
        rows: Vec<String>,
        start: (i32, i32),
        key: (i32, i32),
        door: (i32, i32),
        treasure: (i32, i32),
        entrance: Option<(i32, i32)>,
    },
    Line {
        length: f64,
        thresholds: Vec<f64>,
    },
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", post(start_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/stop", post(stop_run))
        .route("/runs/{id}/annotations/pending", get(pending))
        .route("/runs/{id}/annotations/{task}", post(submit))
        .route("/runs/{id}/metrics", get(metrics))
        .route("/runs/{id}/preferred", get(preferred))
        .route("/runs/{id}/map", get(map))
        .route("/runs/{id}/audit", get(audit))
        .with_state(state)
}

async fn start_run(
    State(state): State<Arc<AppState>>,
    body: Result<Json<StartRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<runs::RunHandle>), ApiError> {
    let Json(req) = body?;
    let config = TrainConfig::resolve(req.config.as_ref(), &[]).map_err(|e| ApiError::InvalidConfig(e.to_string()))?;
    let mut table = state.runs.lock().unwrap_or_else(|e| e.into_inner());
    let id = match req.id {
        Some(id) if id.is_empty() => return Err(ApiError::BadRequest("run id must not be empty".into())),
        Some(id) => id,
        None => loop {
            let mut c = state.counter.lock().unwrap_or_else(|e| e.into_inner());
            *c += 1;
            let candidate = format!("run-{}", *c);
            if !table.contains_key(&candidate) {
                break candidate;
            }
        },
    };
    if table.contains_key(&id) {
        return Err(ApiError::Conflict(format!("run '{id}' already exists")));
    }
    let dir = match &state.out_root {
        Some(root) => Some(RunDir::create(root.join(&id)).map_err(|e| ApiError::Internal(e.to_string()))?),
        None => None,
    };
    let run = runs::spawn(id.clone(), config, dir);
    table.insert(id, run.clone());
    Ok((StatusCode::CREATED, Json(run.handle())))
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Vec<runs::RunHandle>> {
    let table = state.runs.lock().unwrap_or_else(|e| e.into_inner());
    let mut out: Vec<_> = table.values().map(|r| r.handle()).collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Json(out)
}

async fn get_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<runs::RunHandle>, ApiError> {
    Ok(Json(state.get(&id)?.handle()))
}

async fn stop_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<runs::RunHandle>, ApiError> {
    let run = state.get(&id)?;
    run.request_stop();
    Ok(Json(run.handle()))
}

async fn pending(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Vec<runs::AnnotationTask>>, ApiError> {
    Ok(Json(state.get(&id)?.pending()))
}

async fn submit(
    State(state): State<Arc<AppState>>,
    Path((id, task)): Path<(String, String)>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> Result<Json<SubmitAck>, ApiError> {
    let run = state.get(&id)?;
    let Json(req) = body?;
    match run.submit(&task, req.version, &req.outcomes) {
        Ok(remaining) => Ok(Json(SubmitAck {
            task,
            accepted: req.outcomes.len(),
            remaining,
        })),
        Err(SubmitError::UnknownTask) => Err(ApiError::NotFound(format!("unknown task '{task}'"))),
        Err(SubmitError::AlreadyJudged) => Err(ApiError::Conflict(format!("task '{task}' was already judged"))),
        Err(SubmitError::Expired) => Err(ApiError::Conflict(format!("task '{task}' has expired"))),
        Err(SubmitError::StaleVersion { expected, got }) => Err(ApiError::Conflict(format!(
            "stale preferred-set version {got}; task '{task}' was issued against version {expected}"
        ))),
        Err(SubmitError::Invalid(msg)) => Err(ApiError::BadRequest(msg)),
    }
}

async fn metrics(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SinceQuery>,
) -> Result<Json<Vec<lope_core::IterationMetrics>>, ApiError> {
    Ok(Json(state.get(&id)?.metrics_since(q.since.unwrap_or(-1))))
}

async fn preferred(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<lope_core::annotator::PreferredSetExport>, ApiError> {
    Ok(Json(state.get(&id)?.preferred()))
}

async fn audit(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<runs::Audit>, ApiError> {
    Ok(Json(state.get(&id)?.audit()))
}

async fn map(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<MapPayload>, ApiError> {
    let run = state.get(&id)?;
    let env = run.config.env.build().map_err(|e| ApiError::Internal(e.to_string()))?;
    let payload = match (&run.config.env, env.layout()) {
        (EnvConfig::Grid { .. }, Some(l)) => MapPayload::Grid {
            width: l.width,
            height: l.height,
            rows: l.ascii().lines().map(str::to_string).collect(),
            start: l.start,
            key: l.key,
            door: l.door,
            treasure: l.treasure,
            entrance: l.entrance,
        },
        (EnvConfig::Line(c), _) => MapPayload::Line {
            length: c.length,
            thresholds: match env.nodes() {
                lope_core::env::NodeSpec::Line { thresholds } => thresholds,
                lope_core::env::NodeSpec::Grid { .. } => Vec::new(),
            },
        },
        _ => return Err(ApiError::Internal("grid run without a layout".into())),
    };
    Ok(Json(payload))
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    let shutdown_state = state.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            shutdown_state.stop_all();
        })
        .await
}
