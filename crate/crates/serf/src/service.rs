//! HTTP front end over [`Session`]s.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Mutex;

use crate::session::{CreateRequest, DeformRequest, PaintRequest, PromptRequest, Session, SessionError, SessionResult};

pub const DATA_DIR_ENV: &str = "SERF_DATA_DIR";
pub const PREVIEW_RES_ENV: &str = "SERF_PREVIEW_RES";
pub const DEFAULT_PREVIEW_RES: u32 = 64;
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Longer side of preview renders.
    pub preview_res: u32,
}

impl ServiceConfig {
    pub fn from_env() -> Self {
        let data_dir = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("serf-data"));
        let preview_res = std::env::var(PREVIEW_RES_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(DEFAULT_PREVIEW_RES);
        Self { data_dir, preview_res }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    /// Loaded session, replaying it from disk on first use.
    pub async fn session(&self, id: &str) -> SessionResult<Arc<Session>> {
        let mut sessions = self.sessions.lock().await;
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        let (dir, owned) = (self.config.data_dir.clone(), id.to_string());
        let session = blocking(move || Session::open(&dir, &owned)).await?;
        sessions.insert(id.to_string(), session.clone());
        Ok(session)
    }
}

pub struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            SessionError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            SessionError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            SessionError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            SessionError::Unprocessable(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unprocessable"),
            SessionError::Dependency(_) => (StatusCode::BAD_GATEWAY, "segmenter_unavailable"),
            SessionError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            log::error!("{kind}: {}", self.0);
        }
        (status, Json(json!({ "error": kind, "detail": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> SessionResult<T> + Send + 'static) -> SessionResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| SessionError::Internal(format!("worker failed: {e}")))?
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Revision the client expects, from `If-Match`.
fn expected_revision(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let text = v.to_str().unwrap_or_default().trim().trim_matches('"');
    text.parse()
        .map(Some)
        .map_err(|_| SessionError::BadRequest(format!("If-Match must be a revision number, got {text:?}")).into())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/prompts", post(submit_prompts))
        .route("/sessions/:id/frames/:frame/mask.png", get(get_mask))
        .route("/sessions/:id/vertex-mask.svmk", get(get_vertex_mask))
        .route("/sessions/:id/render", post(render))
        .route("/sessions/:id/deform", post(deform))
        .route("/sessions/:id/paint", post(paint))
        .route("/sessions/:id/jobs/:job", get(get_job))
        .with_state(state)
}

async fn create_session(State(app): State<Arc<AppState>>, Json(request): Json<CreateRequest>) -> ApiResult<Response> {
    let dir = app.config.data_dir.clone();
    let session = blocking(move || Session::create(&dir, &request)).await?;
    let summary = session.snapshot().summary.clone();
    app.sessions.lock().await.insert(session.id.clone(), session);
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(app.session(&id).await?.snapshot().summary.clone()))
}

async fn submit_prompts(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(request): Json<PromptRequest>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id).await?;
    let (key, expected) = (idempotency_key(&headers), expected_revision(&headers)?);
    let out = blocking(move || session.submit_prompts(&request, key.as_deref(), expected)).await?;
    Ok(Json(out))
}

async fn get_mask(State(app): State<Arc<AppState>>, Path((id, frame)): Path<(String, usize)>) -> ApiResult<Response> {
    let session = app.session(&id).await?;
    Ok(png(blocking(move || session.mask_png(frame)).await?))
}

async fn get_vertex_mask(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id).await?;
    Ok((
        [(header::CONTENT_TYPE, "application/octet-stream")],
        session.vertex_mask_bytes(),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct RenderRequest {
    frame: usize,
    #[serde(default)]
    full_res: bool,
}

async fn render(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(request): Json<RenderRequest>,
) -> ApiResult<Response> {
    let session = app.session(&id).await?;
    let preview = app.config.preview_res;
    let bytes = blocking(move || session.render(request.frame, request.full_res, preview)).await?;
    Ok(png(bytes))
}

async fn deform(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(request): Json<DeformRequest>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id).await?;
    let (key, expected) = (idempotency_key(&headers), expected_revision(&headers)?);
    Ok(Json(
        blocking(move || session.deform(&request, key.as_deref(), expected)).await?,
    ))
}

/// Body is the edited frame as PNG; `frame`, `tau` and
/// `fine_tune_iterations` come from the query string.
async fn paint(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(request): Query<PaintRequest>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id).await?;
    let (key, expected) = (idempotency_key(&headers), expected_revision(&headers)?);
    let worker = session.clone();
    let (response, job) = blocking(move || worker.paint(&request, &body, key.as_deref(), expected)).await?;
    if let Some(job) = job {
        tokio::task::spawn_blocking(move || session.run_job(job));
    }
    Ok(Json(response))
}

async fn get_job(State(app): State<Arc<AppState>>, Path((id, job)): Path<(String, u64)>) -> ApiResult<Json<Value>> {
    let session = app.session(&id).await?;
    let info = session
        .job(job)
        .ok_or_else(|| SessionError::NotFound(format!("session {id} has no job {job}")))?;
    Ok(Json(serde_json::to_value(info).expect("job serialises")))
}

/// Serves until the process is stopped.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.data_dir)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving on http://{} with data in {}",
        listener.local_addr()?,
        config.data_dir.display()
    );
    axum::serve(listener, router(AppState::new(config))).await
}
