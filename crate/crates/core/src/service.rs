//! Read-mostly HTTP API over a pipeline store, under `/api/v1/`. Every
//! response is a stored artifact or index entry plus filters. The only write
//! records a review status in the audit log.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::pipeline::{
    arm_comparison_of, disagreements, latest_reports, prompt_deltas, set_disagreement_status, DisagreementFilter,
    PipelineError, Step, Store,
};
use crate::review::{AuditEntry, AuditLog, ResolutionStatus, ReviewError};

/// Settings for one server.
#[derive(Debug, Clone)]
pub struct ApiSession {
    pub store: PathBuf,
    pub read_only: bool,
    pub address: SocketAddr,
    /// Static files served under `/ui/`.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug)]
struct AppState {
    store: PathBuf,
    read_only: bool,
    // One writer at a time inside this process; the store lock covers the rest.
    writes: tokio::sync::Mutex<()>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::UnknownTask(_)
            | PipelineError::UnknownRun(_)
            | PipelineError::UnknownDisagreement { .. }
            | PipelineError::NoStore(_) => StatusCode::NOT_FOUND,
            PipelineError::Locked(_) | PipelineError::Review(ReviewError::Conflict { .. }) => StatusCode::CONFLICT,
            PipelineError::ReadOnly => StatusCode::FORBIDDEN,
            PipelineError::Review(ReviewError::UnknownStatus(_)) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        PipelineError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// Pretty JSON, so identical artifacts give identical bytes.
fn json<T: Serialize>(value: &T) -> ApiResult {
    let body = serde_json::to_vec_pretty(value).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn open(root: &Path) -> Result<Store, ApiError> {
    Ok(Store::open_read_only(root)?)
}

pub fn router(session: &ApiSession) -> Router {
    let state = Arc::new(AppState {
        store: session.store.clone(),
        read_only: session.read_only,
        writes: tokio::sync::Mutex::new(()),
    });
    let api = Router::new()
        .route("/tasks", get(list_tasks))
        .route("/runs", get(list_runs))
        .route("/runs/{run_id}", get(get_run))
        .route("/tasks/{task}/metrics", get(task_metrics))
        .route("/tasks/{task}/arms", get(task_arms))
        .route("/tasks/{task}/disagreements", get(task_disagreements))
        .route("/tasks/{task}/disagreements/{sample_id}/status", post(set_status))
        .route("/tasks/{task}/prompts", get(task_prompts))
        .route("/tasks/{task}/prompt-deltas", get(task_prompt_deltas))
        .route("/audit", get(audit_log))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such endpoint") })
        .with_state(state);
    let mut app = Router::new().nest("/api/v1", api);
    if let Some(dir) = &session.ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app
}

/// Binds and serves until the process ends.
pub async fn serve(session: ApiSession) -> std::io::Result<()> {
    Store::open_read_only(&session.store).map_err(|e| std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(session.address).await?;
    log::info!(
        "serving {} on http://{}{}",
        session.store.display(),
        listener.local_addr()?,
        if session.read_only { " (read-only)" } else { "" }
    );
    axum::serve(listener, router(&session)).await
}

async fn list_tasks(State(s): State<Arc<AppState>>) -> ApiResult {
    blocking(move || {
        let store = open(&s.store)?;
        json(&store.index.tasks.values().collect::<Vec<_>>())
    })
    .await
}

#[derive(Debug, Deserialize)]
struct RunFilter {
    task: Option<String>,
    step: Option<Step>,
}

async fn list_runs(State(s): State<Arc<AppState>>, Query(f): Query<RunFilter>) -> ApiResult {
    blocking(move || {
        let store = open(&s.store)?;
        let runs: Vec<_> = store
            .index
            .runs
            .iter()
            .filter(|r| f.task.as_ref().is_none_or(|t| &r.task_id == t))
            .filter(|r| f.step.is_none_or(|st| r.step == st))
            .collect();
        json(&runs)
    })
    .await
}

async fn get_run(State(s): State<Arc<AppState>>, UrlPath(run_id): UrlPath<String>) -> ApiResult {
    blocking(move || {
        let store = open(&s.store)?;
        let run = store.index.run(&run_id).ok_or(PipelineError::UnknownRun(run_id.clone()))?;
        json(run)
    })
    .await
}

async fn task_metrics(State(s): State<Arc<AppState>>, UrlPath(task): UrlPath<String>) -> ApiResult {
    blocking(move || json(&latest_reports(&open(&s.store)?, &task)?)).await
}

async fn task_arms(State(s): State<Arc<AppState>>, UrlPath(task): UrlPath<String>) -> ApiResult {
    blocking(move || match arm_comparison_of(&open(&s.store)?, &task)? {
        Some(cmp) => json(&cmp),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no arm comparison for {task}"))),
    })
    .await
}

#[derive(Debug, Deserialize)]
struct DisagreementQuery {
    status: Option<String>,
    prompt_version: Option<u32>,
}

async fn task_disagreements(
    State(s): State<Arc<AppState>>,
    UrlPath(task): UrlPath<String>,
    Query(q): Query<DisagreementQuery>,
) -> ApiResult {
    blocking(move || {
        let status = q.status.as_deref().map(ResolutionStatus::parse).transpose()?;
        let filter = DisagreementFilter { status, prompt_version: q.prompt_version };
        json(&disagreements(&open(&s.store)?, &task, filter)?)
    })
    .await
}

async fn task_prompts(State(s): State<Arc<AppState>>, UrlPath(task): UrlPath<String>) -> ApiResult {
    blocking(move || {
        let store = open(&s.store)?;
        store.task(&task)?;
        let prompts = store.prompts();
        let versions = prompts.versions(&task).map_err(PipelineError::from)?;
        let all = versions
            .into_iter()
            .map(|v| prompts.load(&task, v).map_err(PipelineError::from))
            .collect::<Result<Vec<_>, _>>()?;
        json(&all)
    })
    .await
}

async fn task_prompt_deltas(State(s): State<Arc<AppState>>, UrlPath(task): UrlPath<String>) -> ApiResult {
    blocking(move || json(&prompt_deltas(&open(&s.store)?, &task)?)).await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AuditListing {
    /// Pass as `expected_seq` to make a write conditional on no other write
    /// landing first.
    pub next_seq: u64,
    pub entries: Vec<AuditEntry>,
}

async fn audit_log(State(s): State<Arc<AppState>>) -> ApiResult {
    blocking(move || {
        let store = open(&s.store)?;
        let log = AuditLog::open(&store.audit_path())?;
        json(&AuditListing { next_seq: log.next_seq(), entries: log.entries().to_vec() })
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusUpdate {
    pub status: String,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub expected_seq: Option<u64>,
}

async fn set_status(
    State(s): State<Arc<AppState>>,
    UrlPath((task, sample_id)): UrlPath<(String, String)>,
    Json(body): Json<StatusUpdate>,
) -> ApiResult {
    if s.read_only {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "server is read-only"));
    }
    let _guard = s.writes.lock().await;
    let state = s.clone();
    blocking(move || {
        let status = ResolutionStatus::parse(&body.status)?;
        let entry = set_disagreement_status(&state.store, &task, &sample_id, status, body.note, body.expected_seq)?;
        json(&entry)
    })
    .await
}

/// Runs [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(session: ApiSession) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(session))
}
