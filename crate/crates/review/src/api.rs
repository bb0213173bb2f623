//! JSON-over-HTTP interface of the review service.
//!
//! | route | caller |
//! |---|---|
//! | `POST /batches` | coordinator |
//! | `GET /batches/{id}` | coordinator |
//! | `GET /batches/{id}/summary` | coordinator or panel expert |
//! | `GET /experts/{id}/tasks` | that expert |
//! | `POST /verdicts` | panel expert |
//! | `GET /images/{meme_id}` | any token (header or `?token=`) |
//!
//! Every caller authenticates with `Authorization: Bearer <token>`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use memeshield_core::correction::CorrectionCandidate;
use memeshield_core::dataset::read_image;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::model::{ExpertVerdict, Judgment, ReviewError, TaskView};
use crate::store::ReviewStore;

/// Shared-secret token map, loaded from TOML:
///
/// ```toml
/// coordinator_token = "..."
/// [experts]
/// alice = "..."
/// ```
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct AuthConfig {
    pub coordinator_token: String,
    #[serde(default)]
    pub experts: BTreeMap<String, String>,
}

impl AuthConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, ReviewError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReviewError::Storage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ReviewError::Storage(format!("{}: {e}", path.display())))
    }

    fn caller(&self, token: &str) -> Option<Caller> {
        if !self.coordinator_token.is_empty() && token == self.coordinator_token {
            return Some(Caller::Coordinator);
        }
        self.experts
            .iter()
            .find(|(_, t)| !t.is_empty() && t.as_str() == token)
            .map(|(id, _)| Caller::Expert(id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Caller {
    Coordinator,
    Expert(String),
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ReviewStore>,
    pub auth: Arc<AuthConfig>,
    /// Root that item image paths are relative to.
    pub data_root: Option<PathBuf>,
}

pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": msg.into() }) }
    }

    fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "missing or unknown bearer token")
    }

    fn forbidden(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, msg)
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::InvalidQuorum(_) | ReviewError::InvalidPanel(_) => StatusCode::BAD_REQUEST,
            ReviewError::Forbidden { .. } => StatusCode::FORBIDDEN,
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::ItemClosed(_) | ReviewError::BatchIncomplete { .. } => StatusCode::CONFLICT,
            ReviewError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn authenticate(state: &AppState, headers: &HeaderMap) -> ApiResult<Caller> {
    bearer(headers)
        .and_then(|t| state.auth.caller(t))
        .ok_or_else(ApiError::unauthorized)
}

fn require_coordinator(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    match authenticate(state, headers)? {
        Caller::Coordinator => Ok(()),
        Caller::Expert(_) => Err(ApiError::forbidden("coordinator token required")),
    }
}

#[derive(Debug, Deserialize, Serialize)]
pub struct CreateBatchRequest {
    pub candidates: Vec<CorrectionCandidate>,
    pub panel: Vec<String>,
    pub quorum: usize,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct CreateBatchResponse {
    pub batch_id: String,
    pub items: usize,
}

async fn create_batch(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<CreateBatchRequest>,
) -> ApiResult<(StatusCode, Json<CreateBatchResponse>)> {
    require_coordinator(&state, &headers)?;
    if let Some(unknown) = req.panel.iter().find(|e| !state.auth.experts.contains_key(*e)) {
        return Err(ReviewError::InvalidPanel(format!("expert {unknown:?} has no token configured")).into());
    }
    let batch = state.store.create_batch(&req.candidates, &req.panel, req.quorum)?;
    Ok((
        StatusCode::CREATED,
        Json(CreateBatchResponse { batch_id: batch.batch_id, items: batch.items.len() }),
    ))
}

async fn get_batch(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    require_coordinator(&state, &headers)?;
    Ok(Json(state.store.batch(&id)?).into_response())
}

async fn batch_summary(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let caller = authenticate(&state, &headers)?;
    let batch = state.store.batch(&id)?;
    if let Caller::Expert(e) = &caller {
        if !batch.has_expert(e) {
            return Err(ApiError::forbidden("not on this batch's panel"));
        }
    }
    match state.store.batch_summary(&id) {
        Ok(summary) => Ok(Json(summary).into_response()),
        Err(e @ ReviewError::BatchIncomplete { .. }) => Ok((
            StatusCode::CONFLICT,
            Json(json!({
                "error": e.to_string(),
                "decided": batch.decided(),
                "total": batch.items.len(),
            })),
        )
            .into_response()),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskList {
    pub expert_id: String,
    pub tasks: Vec<TaskView>,
}

async fn expert_tasks(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<TaskList>> {
    match authenticate(&state, &headers)? {
        Caller::Expert(e) if e == id => Ok(Json(TaskList { tasks: state.store.tasks_for(&id), expert_id: id })),
        _ => Err(ApiError::forbidden("tasks are visible only to their expert")),
    }
}

#[derive(Debug, Deserialize, Serialize)]
pub struct VerdictRequest {
    pub item_id: String,
    pub judgment: Judgment,
    #[serde(default)]
    pub expert_id: Option<String>,
}

async fn submit_verdict(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<VerdictRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    let Caller::Expert(expert_id) = authenticate(&state, &headers)? else {
        return Err(ApiError::forbidden("only experts submit verdicts"));
    };
    if req.expert_id.as_ref().is_some_and(|e| *e != expert_id) {
        return Err(ApiError::forbidden("expert_id does not match token"));
    }
    state.store.submit_verdict(ExpertVerdict {
        expert_id,
        item_id: req.item_id.clone(),
        judgment: req.judgment,
        submitted_at: Utc::now(),
    })?;
    Ok(Json(json!({ "item_id": req.item_id, "accepted": true })))
}

async fn image(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<HashMap<String, String>>,
    UrlPath(meme_id): UrlPath<String>,
) -> ApiResult<Response> {
    let token = bearer(&headers).or(query.get("token").map(String::as_str));
    token.and_then(|t| state.auth.caller(t)).ok_or_else(ApiError::unauthorized)?;
    let rel = state
        .store
        .image_path(&meme_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no image for meme {meme_id}")))?;
    let root = state
        .data_root
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no image root configured"))?;
    let img = read_image(&root.join(rel)).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, img.mime)], img.bytes).into_response())
}

pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let mut app = Router::new()
        .route("/batches", post(create_batch))
        .route("/batches/{id}", get(get_batch))
        .route("/batches/{id}/summary", get(batch_summary))
        .route("/experts/{id}/tasks", get(expert_tasks))
        .route("/verdicts", post(submit_verdict))
        .route("/images/{meme_id}", get(image))
        .with_state(state);
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}
