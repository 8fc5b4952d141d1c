//! JSON API over [`Service`]. Errors are `{code, message}` bodies.

use std::path::{Component, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chickface::detection::{DetectorConfig, FaceDetector};
use chickface::keypoints::KeypointModel;
use chickface::parallel::Execution;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ServiceError;
use crate::model::{AnnotationTask, Correction, ManualAnnotation};
use crate::service::{AdvanceConfig, Drafter, Service};

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Service>,
    pub advance: AdvanceConfig,
    pub detector: Arc<dyn FaceDetector>,
    pub detector_cfg: DetectorConfig,
    pub exec: Execution,
    /// Static files served for unmatched paths.
    pub ui_dir: Option<PathBuf>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownTask(_) | ServiceError::UnknownFrame(_) => StatusCode::NOT_FOUND,
            ServiceError::InvalidGeometry(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::IllegalTransition { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::VersionConflict { .. } | ServiceError::Busy => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.body())).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

/// Runs blocking store or training work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::BadRequest(format!("worker failed: {e}")))?
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/rounds", get(rounds))
        .route("/api/rounds/seed", post(seed))
        .route("/api/rounds/propose", post(propose))
        .route("/api/rounds/advance", post(advance))
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}", get(task))
        .route("/api/tasks/{id}/correction", post(correction))
        .route("/api/export", get(export))
        .route("/images/{frame_id}", get(image))
        .route("/openapi.json", get(openapi))
        .fallback(static_file)
        .with_state(state)
}

async fn rounds(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    let svc = s.service.clone();
    Ok(Json(blocking(move || svc.rounds()).await?))
}

#[derive(Deserialize)]
struct SeedRequest {
    annotations: Vec<ManualAnnotation>,
    #[serde(default)]
    editor: Option<String>,
}

async fn seed(State(s): State<AppState>, Json(req): Json<SeedRequest>) -> ApiResult<impl IntoResponse> {
    let svc = s.service.clone();
    Ok(Json(blocking(move || svc.seed_round(&req.annotations, req.editor.as_deref())).await?))
}

#[derive(Deserialize)]
struct ProposeRequest {
    frame_ids: Vec<String>,
}

async fn propose(State(s): State<AppState>, Json(req): Json<ProposeRequest>) -> ApiResult<impl IntoResponse> {
    let out = blocking(move || {
        let kp = s.service.latest_keypoint_model()?.map(|p| KeypointModel::load(&p)).transpose()?;
        let drafter = Drafter {
            detector: s.detector.as_ref(),
            detector_cfg: &s.detector_cfg,
            keypoints: kp.as_ref().map(|m| m as &dyn chickface::keypoints::HeatmapModel),
        };
        s.service.propose(&req.frame_ids, &drafter, s.exec)
    })
    .await?;
    Ok(Json(out))
}

async fn advance(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.service.advance_round(&s.advance, s.exec)).await?))
}

#[derive(Deserialize)]
struct NextQuery {
    editor: String,
}

#[derive(Serialize, Deserialize)]
pub struct TaskView {
    pub task: AnnotationTask,
    pub image_url: String,
}

fn view(task: AnnotationTask) -> TaskView {
    let image_url = format!("/images/{}", task.frame_id);
    TaskView { task, image_url }
}

async fn next_task(State(s): State<AppState>, Query(q): Query<NextQuery>) -> ApiResult<Response> {
    let svc = s.service.clone();
    Ok(match blocking(move || svc.next_task(&q.editor)).await? {
        Some(t) => Json(view(t)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn task(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let svc = s.service.clone();
    Ok(Json(view(blocking(move || svc.task(&id)).await?)))
}

async fn correction(State(s): State<AppState>, Path(id): Path<String>, Json(c): Json<Correction>) -> ApiResult<impl IntoResponse> {
    let svc = s.service.clone();
    Ok(Json(blocking(move || svc.submit_correction(&id, &c)).await?))
}

#[derive(Deserialize)]
struct ExportQuery {
    /// Comma-separated round numbers; all rounds when absent.
    #[serde(default)]
    rounds: Option<String>,
}

async fn export(State(s): State<AppState>, Query(q): Query<ExportQuery>) -> ApiResult<impl IntoResponse> {
    let rounds = match q.rounds.as_deref().filter(|r| !r.trim().is_empty()) {
        None => None,
        Some(r) => Some(
            r.split(',')
                .map(|x| x.trim().parse::<i64>().map_err(|_| ServiceError::BadRequest(format!("bad round `{x}`"))))
                .collect::<ApiResult<Vec<_>>>()?,
        ),
    };
    let svc = s.service.clone();
    let bytes = blocking(move || svc.export_ground_truth(rounds.as_deref())).await?;
    Ok((
        [(header::CONTENT_TYPE, "application/zip"), (header::CONTENT_DISPOSITION, "attachment; filename=\"ground_truth.zip\"")],
        Bytes::from(bytes),
    ))
}

async fn image(State(s): State<AppState>, Path(frame_id): Path<String>) -> ApiResult<impl IntoResponse> {
    let svc = s.service.clone();
    let bytes = blocking(move || Ok(std::fs::read(svc.frame_image(&frame_id)?)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Bytes::from(bytes)))
}

async fn static_file(State(s): State<AppState>, uri: Uri) -> Response {
    let Some(dir) = s.ui_dir else { return StatusCode::NOT_FOUND.into_response() };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = std::path::Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let mime = match rel.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    };
    match tokio::fs::read(dir.join(rel)).await {
        Ok(b) => ([(header::CONTENT_TYPE, mime)], Bytes::from(b)).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn openapi() -> impl IntoResponse {
    Json(openapi_document())
}

pub fn openapi_document() -> serde_json::Value {
    let err = json!({"description": "error", "content": {"application/json": {"schema": {"$ref": "#/components/schemas/Error"}}}});
    let ok = |d: &str| json!({"description": d, "content": {"application/json": {}}});
    json!({
        "openapi": "3.0.3",
        "info": {"title": "chickface annotation service", "version": env!("CARGO_PKG_VERSION")},
        "paths": {
            "/api/rounds": {"get": {"summary": "List rounds with model versions and counts", "responses": {"200": ok("rounds")}}},
            "/api/rounds/seed": {"post": {"summary": "Store manual seed annotations as round 0", "responses": {"200": ok("seed outcome"), "400": err}}},
            "/api/rounds/propose": {"post": {"summary": "Draft annotations for frames with the current models", "responses": {"200": ok("drafts"), "400": err}}},
            "/api/rounds/advance": {"post": {"summary": "Retrain on accumulated ground truth and open the next round", "responses": {"200": ok("advance outcome"), "409": err}}},
            "/api/tasks/next": {"get": {
                "summary": "Claim the oldest predicted task",
                "parameters": [{"name": "editor", "in": "query", "required": true, "schema": {"type": "string"}}],
                "responses": {"200": ok("task"), "204": {"description": "queue empty"}}
            }},
            "/api/tasks/{id}": {"get": {
                "summary": "Fetch a task",
                "parameters": [{"name": "id", "in": "path", "required": true, "schema": {"type": "string"}}],
                "responses": {"200": ok("task"), "404": err}
            }},
            "/api/tasks/{id}/correction": {"post": {
                "summary": "Submit a revision, acceptance or quality rejection",
                "parameters": [{"name": "id", "in": "path", "required": true, "schema": {"type": "string"}}],
                "responses": {"200": ok("updated task"), "400": err, "404": err, "409": err, "422": err}
            }},
            "/api/export": {"get": {
                "summary": "Ground-truth zip",
                "parameters": [{"name": "rounds", "in": "query", "required": false, "schema": {"type": "string"}}],
                "responses": {"200": {"description": "zip", "content": {"application/zip": {}}}}
            }},
            "/images/{frame_id}": {"get": {
                "summary": "Raw view image",
                "parameters": [{"name": "frame_id", "in": "path", "required": true, "schema": {"type": "string"}}],
                "responses": {"200": {"description": "png", "content": {"image/png": {}}}, "404": err}
            }}
        },
        "components": {"schemas": {"Error": {
            "type": "object",
            "required": ["code", "message"],
            "properties": {"code": {"type": "string"}, "message": {"type": "string"}}
        }}}
    })
}

/// Serves until the listener fails.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
