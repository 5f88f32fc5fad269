//! HTTP front end for annotation projects.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use bindkit::annotate::{
    AnnotationLabel, AnnotationStore, AnnotationTask, ConsensusPair, ConsensusRule, ProjectInfo, ProjectSpec,
    Split2Export,
};
use bindkit::Error;

pub const DEFAULT_LIMIT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownProject(_) => (StatusCode::NOT_FOUND, "unknown_project"),
            Error::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            Error::DuplicateProject(_) => (StatusCode::CONFLICT, "duplicate_project"),
            Error::DuplicateLabel { .. } => (StatusCode::CONFLICT, "duplicate_label"),
            Error::TaskSaturated(_) => (StatusCode::CONFLICT, "task_saturated"),
            Error::ForeignCandidate { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "foreign_candidate"),
            Error::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_json", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_query", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<AnnotationStore>>,
}

impl AppState {
    pub fn new(store: AnnotationStore) -> Self {
        Self {
            store: Arc::new(Mutex::new(store)),
        }
    }

    fn lock(&self) -> MutexGuard<'_, AnnotationStore> {
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub projects: usize,
}

#[derive(Debug, Deserialize)]
pub struct TasksQuery {
    annotator: Option<String>,
    limit: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct ConsensusQuery {
    required: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: usize,
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        projects: s.lock().projects().len(),
    })
}

async fn list_projects(State(s): State<AppState>) -> Json<Vec<ProjectInfo>> {
    Json(s.lock().projects())
}

async fn create_project(
    State(s): State<AppState>,
    body: Result<Json<ProjectSpec>, JsonRejection>,
) -> Result<(StatusCode, Json<ProjectInfo>), ApiError> {
    let Json(spec) = body?;
    let mut store = s.lock();
    let existed = store.project_info(&spec.name).is_ok();
    let info = store.create_project(spec)?;
    let status = if existed { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(info)))
}

async fn next_tasks(
    State(s): State<AppState>,
    Path(project): Path<String>,
    q: Result<Query<TasksQuery>, QueryRejection>,
) -> ApiResult<Vec<AnnotationTask>> {
    let Query(q) = q?;
    let annotator = q
        .annotator
        .filter(|a| !a.is_empty())
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_annotator", "annotator query parameter is required"))?;
    let limit = q.limit.unwrap_or(DEFAULT_LIMIT);
    Ok(Json(s.lock().next_tasks(&project, &annotator, limit, now_ms())?))
}

async fn submit_labels(
    State(s): State<AppState>,
    body: Result<Json<Vec<AnnotationLabel>>, JsonRejection>,
) -> ApiResult<Accepted> {
    let Json(labels) = body?;
    let accepted = s.lock().submit_labels(labels, now_ms())?;
    Ok(Json(Accepted { accepted }))
}

async fn export_split2(State(s): State<AppState>, Path(project): Path<String>) -> ApiResult<Split2Export> {
    Ok(Json(s.lock().export_split2(&project)?))
}

async fn export_consensus(
    State(s): State<AppState>,
    Path(project): Path<String>,
    q: Result<Query<ConsensusQuery>, QueryRejection>,
) -> ApiResult<Vec<ConsensusPair>> {
    let Query(q) = q?;
    let mut rule = ConsensusRule::default();
    if let Some(r) = q.required {
        rule.required_annotators = r;
    }
    Ok(Json(s.lock().export_consensus(&project, rule)?))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/projects", get(list_projects).post(create_project))
        .route("/api/projects/{project}/tasks", get(next_tasks))
        .route("/api/labels", post(submit_labels))
        .route("/api/projects/{project}/export/split2", get(export_split2))
        .route("/api/projects/{project}/export/consensus", get(export_consensus))
        .fallback(not_found)
        .with_state(state)
}

/// Serves the API until ctrl-c.
pub async fn serve(addr: SocketAddr, store: AnnotationStore) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(store)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
