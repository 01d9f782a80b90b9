//! Local HTTP service for review sessions.
//!
//! Reads run concurrently against the folded session state. Writes go
//! through a single writer slot; a write that arrives while another is in
//! flight is refused with 409 rather than queued.

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use benthos_core::detfuse::{crop_patch, embed_2d, DebrisClass, FeatureView};
use benthos_core::raster::read_rgb;
use benthos_core::review::{AuditEvent, Command, ExportRecord, ReviewSession, ReviewState};
use benthos_core::Error;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 8737;
pub const DEFAULT_ACTOR: &str = "inspector";
pub const THUMBS_DIR: &str = "thumbs";

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownDetection(_) => StatusCode::NOT_FOUND,
            Error::Precondition(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Format(_) | Error::Invalid(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared state behind the router.
#[derive(Debug)]
pub struct AppState {
    session: RwLock<ReviewSession>,
    writer: tokio::sync::Mutex<()>,
    fields: Mutex<HashMap<FeatureView, FieldView>>,
}

impl AppState {
    pub fn new(session: ReviewSession) -> Arc<Self> {
        Arc::new(Self {
            session: RwLock::new(session),
            writer: tokio::sync::Mutex::new(()),
            fields: Mutex::new(HashMap::new()),
        })
    }

    pub fn open(session_dir: &Path) -> benthos_core::Result<Arc<Self>> {
        Ok(Self::new(ReviewSession::open(session_dir)?))
    }

    /// Reserves the single writer slot, or `None` if a write is in flight.
    pub fn try_begin_write(&self) -> Option<tokio::sync::MutexGuard<'_, ()>> {
        self.writer.try_lock().ok()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, ReviewSession> {
        self.session.read().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionView {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub thumbnail: String,
    pub class: DebrisClass,
    pub detector_class: DebrisClass,
    pub state: ReviewState,
    pub max_score: f64,
    pub uncertainty: f64,
    pub spectral_covered: bool,
    pub frame_id: String,
    pub t: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub view: FeatureView,
    pub detections: Vec<DetectionView>,
    pub classes: Vec<DebrisClass>,
    /// Number of events applied; grows with every accepted mutation.
    pub audit_cursor: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FieldPoint {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FieldView {
    pub view: FeatureView,
    pub degenerate: bool,
    pub points: Vec<FieldPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MutationResponse {
    pub event: AuditEvent,
    pub audit_cursor: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdsBody {
    ids: Vec<u32>,
    #[serde(default)]
    actor: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReclassifyBody {
    ids: Vec<u32>,
    class: String,
    #[serde(default)]
    actor: Option<String>,
}

#[derive(Debug, Deserialize)]
struct FieldQuery {
    view: Option<String>,
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

pub fn session_view(session: &ReviewSession) -> SessionView {
    SessionView {
        session_id: session.id.clone(),
        view: session.view,
        detections: session
            .detections()
            .into_iter()
            .map(|d| DetectionView {
                id: d.id,
                x: d.embedding[0],
                y: d.embedding[1],
                thumbnail: format!("/api/thumb/{}", d.id),
                class: d.class,
                detector_class: d.raw.class,
                state: d.state,
                max_score: d.raw.scores.max(),
                uncertainty: d.uncertainty(),
                spectral_covered: d.spectral_covered,
                frame_id: d.raw.frame_id.clone(),
                t: d.raw.t,
            })
            .collect(),
        classes: DebrisClass::ALL.to_vec(),
        audit_cursor: session.log().len(),
        rejected: session.rejected_count(),
    }
}

/// 2D layout of the detections using only the features of `view`.
pub fn field_view(session: &ReviewSession, view: FeatureView) -> benthos_core::Result<FieldView> {
    let dets = session.initial();
    let feats: Vec<&[f64]> = dets.iter().map(|d| d.features.view(view)).collect();
    let e = embed_2d(&feats)?;
    Ok(FieldView {
        view,
        degenerate: e.degenerate,
        points: dets
            .iter()
            .zip(e.points)
            .map(|(d, p)| FieldPoint {
                id: d.id,
                x: p[0],
                y: p[1],
            })
            .collect(),
    })
}

async fn get_session(State(state): State<Arc<AppState>>) -> Json<SessionView> {
    Json(session_view(&state.read()))
}

async fn get_field(State(state): State<Arc<AppState>>, Query(q): Query<FieldQuery>) -> ApiResult<Json<FieldView>> {
    let view: FeatureView = match q.view.as_deref() {
        None => FeatureView::All,
        Some(v) => v.parse().map_err(ApiError::from)?,
    };
    if let Some(f) = state.fields.lock().unwrap_or_else(|e| e.into_inner()).get(&view) {
        return Ok(Json(f.clone()));
    }
    let field = field_view(&state.read(), view)?;
    state
        .fields
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(view, field.clone());
    Ok(Json(field))
}

async fn get_thumb(State(state): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>) -> ApiResult<Response> {
    let id: u32 = raw
        .trim_end_matches(".png")
        .parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("bad detection id {raw:?}")))?;
    let (det, cache_dir, frames) = {
        let s = state.read();
        let det = s.detection(id).cloned().ok_or(ApiError::from(Error::UnknownDetection(id)))?;
        (det, s.dir().map(|d| d.join(THUMBS_DIR)), s.frames_dir().map(Path::to_path_buf))
    };
    let cached = cache_dir.as_ref().map(|d| d.join(format!("{id}.png")));
    if let Some(bytes) = cached.as_ref().and_then(|p| std::fs::read(p).ok()) {
        return Ok(png_response(bytes));
    }
    let frames = frames.ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "session has no frame images"))?;
    let bytes = tokio::task::spawn_blocking(move || render_thumb(&frames, &det.raw.frame_id, det.raw.bbox))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    if let (Some(dir), Some(path)) = (cache_dir, cached) {
        if let Err(e) = std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(&path, &bytes)) {
            log::warn!("thumbnail cache {}: {e}", path.display());
        }
    }
    Ok(png_response(bytes))
}

fn render_thumb(frames: &Path, frame_id: &str, bbox: [f64; 4]) -> ApiResult<Vec<u8>> {
    let frame = read_rgb(&frames.join(format!("{frame_id}.ppm"))).map_err(|e| {
        if e.is_io() {
            ApiError::new(StatusCode::NOT_FOUND, e.to_string())
        } else {
            ApiError::from(e)
        }
    })?;
    let patch = crop_patch(&frame, bbox)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "detection box lies outside its frame"))?;
    let mut out = Cursor::new(Vec::new());
    patch
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(out.into_inner())
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], bytes).into_response()
}

async fn get_export(State(state): State<Arc<AppState>>) -> Json<Vec<ExportRecord>> {
    Json(state.read().export_final())
}

fn mutate(state: &AppState, command: Command, ids: &[u32], actor: Option<String>) -> ApiResult<Json<MutationResponse>> {
    let _writer = state
        .try_begin_write()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "another write is in flight"))?;
    let mut session = state.session.write().unwrap_or_else(|e| e.into_inner());
    let actor = actor.unwrap_or_else(|| DEFAULT_ACTOR.to_string());
    if ids.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "ids must not be empty"));
    }
    let event = session.execute(command, ids, &actor)?.clone();
    Ok(Json(MutationResponse {
        event,
        audit_cursor: session.log().len(),
    }))
}

async fn post_reclassify(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<MutationResponse>> {
    let b: ReclassifyBody = parse_body(&body)?;
    let class: DebrisClass = b.class.parse().map_err(ApiError::from)?;
    mutate(&state, Command::Reclassify(class), &b.ids, b.actor)
}

async fn post_verify(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<MutationResponse>> {
    let b: IdsBody = parse_body(&body)?;
    mutate(&state, Command::Verify, &b.ids, b.actor)
}

async fn post_reject(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<MutationResponse>> {
    let b: IdsBody = parse_body(&body)?;
    mutate(&state, Command::Reject, &b.ids, b.actor)
}

async fn post_restore(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<MutationResponse>> {
    let b: IdsBody = parse_body(&body)?;
    mutate(&state, Command::Restore, &b.ids, b.actor)
}

fn localhost_origin(origin: &HeaderValue) -> bool {
    let Ok(o) = origin.to_str() else { return false };
    let host = o
        .strip_prefix("http://")
        .or_else(|| o.strip_prefix("https://"))
        .unwrap_or("");
    let host = match host.strip_prefix("[::1]") {
        Some(_) => "[::1]",
        None => host.split([':', '/']).next().unwrap_or(""),
    };
    matches!(host, "localhost" | "127.0.0.1" | "[::1]")
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|o, _| localhost_origin(o)))
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let api = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/field", get(get_field))
        .route("/api/thumb/{id}", get(get_thumb))
        .route("/api/export", get(get_export))
        .route("/api/reclassify", post(post_reclassify))
        .route("/api/verify", post(post_verify))
        .route("/api/reject", post(post_reject))
        .route("/api/restore", post(post_restore))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors)
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub session_dir: PathBuf,
    pub addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
}

/// Opens the session and serves it until the process is stopped.
pub async fn serve(opts: ServeOptions) -> std::io::Result<()> {
    let state = AppState::open(&opts.session_dir).map_err(|e| match e {
        Error::Io { source, .. } => source,
        other => std::io::Error::new(std::io::ErrorKind::InvalidData, other.to_string()),
    })?;
    let app = router(state, opts.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    log::info!("review service on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_local_origins_pass() {
        for ok in ["http://localhost:5173", "http://127.0.0.1", "https://localhost", "http://[::1]:80"] {
            assert!(localhost_origin(&HeaderValue::from_static(ok)), "{ok}");
        }
        for bad in ["http://example.com", "http://localhost.evil.com", "null", "file://localhost"] {
            assert!(!localhost_origin(&HeaderValue::from_static(bad)), "{bad}");
        }
    }
}
