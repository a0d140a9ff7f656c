use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use percept_core::engine::{Answer, AnswerAck, Engine, EngineError, NextItem};
use percept_core::export::write_ratings_csv;
use percept_core::ids::{ExternalIds, ImageId, SessionId, StudyTarget};
use percept_core::protocol::SessionState;
use percept_core::stats::{required_participants, write_leaderboard_csv};

use crate::config::{CompletionCode, ServiceConfig};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub config: Arc<ServiceConfig>,
}

/// Error body on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_kind: String,
    pub detail: String,
    /// Present when the session has ended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<SessionState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionCode>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error_kind: kind.to_string(),
                detail: detail.into(),
                state: None,
                completion: None,
            },
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

/// HTTP status for an error kind.
pub fn status_for(kind: &str) -> StatusCode {
    match kind {
        "duplicate_participant" | "out_of_order" | "invalid_state" | "duplicate_rating" | "illegal_transition"
        | "idempotency_conflict" | "already_partitioned" | "no_dataset_available" | "no_pair_candidates"
        | "plate_not_available" => StatusCode::CONFLICT,
        "session_ended" => StatusCode::GONE,
        "value_out_of_range" | "manifest_row_invalid" | "insufficient_pool" | "invalid_parameter"
        | "invalid_config" => StatusCode::UNPROCESSABLE_ENTITY,
        "unknown_session" | "unknown_image" | "unknown_study" | "unknown_slot" | "no_ratings" | "not_found" => {
            StatusCode::NOT_FOUND
        }
        "bad_request" => StatusCode::BAD_REQUEST,
        "unauthorized" => StatusCode::UNAUTHORIZED,
        "storage_unavailable" => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let kind = e.kind();
        let mut err = Self::new(status_for(kind), kind, e.to_string());
        if let EngineError::SessionEnded { state, .. } = e {
            err.body.state = Some(state);
        }
        err
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs an engine call off the async workers; appends may fsync.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn idempotency_key(headers: &HeaderMap) -> ApiResult<Option<String>> {
    match headers.get(IDEMPOTENCY_HEADER) {
        None => Ok(None),
        Some(v) => {
            let key = v
                .to_str()
                .map_err(|_| ApiError::bad_request("idempotency key must be visible ASCII"))?;
            if key.is_empty() || key.len() > 200 {
                return Err(ApiError::bad_request("idempotency key must have 1 to 200 characters"));
            }
            Ok(Some(key.to_string()))
        }
    }
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

pub fn router(state: AppState) -> Router {
    let admin = Router::new()
        .route("/manifest", post(ingest_manifest))
        .route("/partition", post(partition))
        .route("/export/ratings", get(export_ratings))
        .route("/export/payouts", get(export_payouts))
        .route("/campaign-status", get(campaign_status))
        .route("/plan", get(plan))
        .route("/expire", post(expire))
        .route("/sessions/{id}/plates/{index}/key", get(plate_key))
        .route("/sessions/{id}/verdict", get(verdict))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_admin));
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_view))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/answers", post(answer))
        .route("/sessions/{id}/abandon", post(abandon))
        .route("/sessions/{id}/plates/{index}", get(plate_png))
        .route("/images/{id}", get(image))
        .route("/leaderboard", get(leaderboard))
        .nest("/admin", admin);
    Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

async fn require_admin(State(app): State<AppState>, request: Request, next: Next) -> Response {
    let token = &app.config.admin_token;
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if token.is_empty() || presented != Some(token.as_str()) {
        return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "admin token required").into_response();
    }
    next.run(request).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
struct EntryParams {
    pid: String,
    #[serde(default)]
    study: String,
    #[serde(default)]
    submission: String,
}

async fn create_session(
    State(app): State<AppState>,
    query: Result<Query<EntryParams>, QueryRejection>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let Query(params) = query?;
    if params.pid.trim().is_empty() {
        return Err(ApiError::bad_request("pid must not be empty"));
    }
    let key = idempotency_key(&headers)?;
    let engine = app.engine.clone();
    let view = blocking(move || {
        let target = engine.resolve_study(Some(&params.study))?;
        let ids = ExternalIds {
            participant_id: params.pid,
            study_id: params.study,
            submission_id: params.submission,
        };
        engine.create_session(ids, &target, key.as_deref())
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn session_view(State(app): State<AppState>, id: Result<UrlPath<String>, PathRejection>) -> ApiResult<Response> {
    let sid = SessionId(id?.0);
    let engine = app.engine.clone();
    let view = blocking(move || engine.session_view(&sid)).await?;
    Ok(Json(view).into_response())
}

/// The next item plus where to fetch its pictures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDescriptor {
    pub item: NextItem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate_url: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_urls: Vec<String>,
}

fn image_url(id: &ImageId) -> String {
    format!("/api/v1/images/{id}")
}

impl ItemDescriptor {
    fn of(session: &SessionId, item: NextItem) -> Self {
        let (plate_url, image_urls) = match &item {
            NextItem::Colorblind { index, .. } => (Some(format!("/api/v1/sessions/{session}/plates/{index}")), vec![]),
            NextItem::Instructions => (None, vec![]),
            NextItem::Comprehension { left, right, .. } => (None, vec![image_url(left), image_url(right)]),
            NextItem::Main { image_id, .. } => (None, vec![image_url(image_id)]),
        };
        Self {
            item,
            plate_url,
            image_urls,
        }
    }
}

/// A terminal session's error, carrying the completion code when there is one.
fn ended(app: &AppState, err: EngineError) -> ApiError {
    let state = match &err {
        EngineError::SessionEnded { state, .. } => Some(*state),
        _ => None,
    };
    let mut api = ApiError::from(err);
    api.body.completion = state.and_then(|s| app.config.completion(s));
    api
}

async fn next_item(State(app): State<AppState>, id: Result<UrlPath<String>, PathRejection>) -> ApiResult<Response> {
    let sid = SessionId(id?.0);
    let engine = app.engine.clone();
    let s = sid.clone();
    let item = tokio::task::spawn_blocking(move || engine.next_item(&s))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ended(&app, e))?;
    Ok(Json(ItemDescriptor::of(&sid, item)).into_response())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerResponse {
    #[serde(flatten)]
    pub ack: AnswerAck,
    /// Set once the answer ended the session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionCode>,
}

async fn answer(
    State(app): State<AppState>,
    id: Result<UrlPath<String>, PathRejection>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let sid = SessionId(id?.0);
    let key = idempotency_key(&headers)?;
    let answer: Answer = json_body(&body)?;
    let engine = app.engine.clone();
    let ack = tokio::task::spawn_blocking(move || engine.answer(&sid, answer, key.as_deref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ended(&app, e))?;
    let completion = app.config.completion(ack.state);
    Ok(Json(AnswerResponse { ack, completion }).into_response())
}

async fn abandon(
    State(app): State<AppState>,
    id: Result<UrlPath<String>, PathRejection>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let sid = SessionId(id?.0);
    let key = idempotency_key(&headers)?;
    let engine = app.engine.clone();
    let payout = blocking(move || engine.abandon(&sid, key.as_deref())).await?;
    Ok(Json(payout).into_response())
}

async fn plate_png(
    State(app): State<AppState>,
    path: Result<UrlPath<(String, usize)>, PathRejection>,
) -> ApiResult<Response> {
    let UrlPath((id, index)) = path?;
    let engine = app.engine.clone();
    let png = blocking(move || engine.plate_png(&SessionId(id), index)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::CACHE_CONTROL, HeaderValue::from_static("no-store")),
        ],
        png,
    )
        .into_response())
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "application/octet-stream",
    }
}

async fn image(
    State(app): State<AppState>,
    id: Result<UrlPath<String>, PathRejection>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let image_id = ImageId(id?.0);
    let etag = format!("\"{image_id}\"");
    let cache = (header::CACHE_CONTROL, "public, max-age=31536000, immutable");
    let engine = app.engine.clone();
    let i = image_id.clone();
    let record = blocking(move || engine.image_record(&i)).await?;
    if headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"))
    {
        return Ok((StatusCode::NOT_MODIFIED, [cache, (header::ETAG, etag.as_str())]).into_response());
    }
    let engine = app.engine.clone();
    let bytes = blocking(move || engine.image_bytes(&image_id)).await?;
    let kind = content_type(&PathBuf::from(&record.path));
    Ok((
        [(header::CONTENT_TYPE, kind), cache, (header::ETAG, etag.as_str())],
        bytes,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct LeaderboardParams {
    model: Option<String>,
    #[serde(default)]
    format: Option<String>,
}

async fn leaderboard(
    State(app): State<AppState>,
    query: Result<Query<LeaderboardParams>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(params) = query?;
    let engine = app.engine.clone();
    let model = params.model.clone();
    let entries = blocking(move || engine.leaderboard(model.as_deref())).await?;
    match params.format.as_deref() {
        None | Some("json") => Ok(Json(entries).into_response()),
        Some("csv") => {
            let mut out = Vec::new();
            write_leaderboard_csv(&entries, &mut out)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
            Ok(csv_response(out))
        }
        Some(other) => Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    }
}

fn csv_response(body: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

#[derive(Debug, Deserialize)]
struct ManifestParams {
    /// Overrides the configured image root.
    root: Option<PathBuf>,
}

async fn ingest_manifest(
    State(app): State<AppState>,
    query: Result<Query<ManifestParams>, QueryRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let Query(params) = query?;
    let root = params.root.unwrap_or_else(|| app.config.image_root.clone());
    let engine = app.engine.clone();
    let summary = blocking(move || engine.ingest_manifest(&body[..], &root)).await?;
    Ok(Json(summary).into_response())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionRequest {
    #[serde(flatten)]
    pub target: StudyTarget,
    pub seed: u64,
}

async fn partition(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: PartitionRequest = json_body(&body)?;
    let engine = app.engine.clone();
    let summary = blocking(move || engine.partition(&req.target, req.seed)).await?;
    Ok(Json(summary).into_response())
}

async fn export_ratings(State(app): State<AppState>) -> ApiResult<Response> {
    let engine = app.engine.clone();
    let out = blocking(move || {
        let mut out = Vec::new();
        write_ratings_csv(&engine.rating_rows(), &mut out).map_err(|e| EngineError::Io(e.into()))?;
        Ok(out)
    })
    .await?;
    Ok(csv_response(out))
}

async fn export_payouts(State(app): State<AppState>) -> ApiResult<Response> {
    let engine = app.engine.clone();
    let out = blocking(move || {
        let mut out = Vec::new();
        engine.write_payouts(&mut out).map_err(|e| EngineError::Io(e.into()))?;
        Ok(out)
    })
    .await?;
    Ok(csv_response(out))
}

async fn campaign_status(State(app): State<AppState>) -> ApiResult<Response> {
    let engine = app.engine.clone();
    let status = blocking(move || {
        engine.expire_stale()?;
        Ok(engine.campaign_status())
    })
    .await?;
    Ok(Json(status).into_response())
}

async fn plan(State(app): State<AppState>) -> Json<percept_core::stats::ParticipantPlan> {
    Json(required_participants(app.engine.config()))
}

async fn expire(State(app): State<AppState>) -> ApiResult<Response> {
    let engine = app.engine.clone();
    let n = blocking(move || engine.expire_stale()).await?;
    Ok(Json(serde_json::json!({ "expired": n })).into_response())
}

async fn plate_key(
    State(app): State<AppState>,
    path: Result<UrlPath<(String, usize)>, PathRejection>,
) -> ApiResult<Response> {
    let UrlPath((id, index)) = path?;
    let engine = app.engine.clone();
    let key = blocking(move || engine.plate_key(&SessionId(id), index)).await?;
    Ok(Json(key).into_response())
}

async fn verdict(State(app): State<AppState>, id: Result<UrlPath<String>, PathRejection>) -> ApiResult<Response> {
    let sid = SessionId(id?.0);
    let engine = app.engine.clone();
    let v = blocking(move || {
        engine.session_view(&sid)?;
        Ok(engine.verdict(&sid))
    })
    .await?;
    Ok(Json(v).into_response())
}
