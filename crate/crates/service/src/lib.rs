//! HTTP front of a run: key annotation queue, pseudo-label review queue,
//! images and status.
//!
//! All state lives in the [`Shared`] session; handlers only translate
//! requests into session calls, so every mutation is journaled before the
//! response goes out.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use gram_sld::journal::ReviewAction;
use gram_sld::model::{BoundingBox, LabelSet, Status};
use gram_sld::session::{QueueKind, Session, Shared};
use gram_sld::Error;

pub type AppState = Arc<Shared>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
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
            Error::UnknownSample(_) => StatusCode::NOT_FOUND,
            Error::RevisionConflict { .. } | Error::IllegalTransition { .. } => StatusCode::CONFLICT,
            Error::InvalidBox { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Invalid(_) => StatusCode::CONFLICT,
            e if e.is_validation() => StatusCode::BAD_REQUEST,
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

/// Runs `f` on the session off the async runtime.
async fn with_session<T: Send + 'static>(
    state: &AppState,
    mutate: bool,
    f: impl FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
) -> ApiResult<T> {
    let shared = state.clone();
    tokio::task::spawn_blocking(move || {
        if mutate {
            let mut out = None;
            let r = shared.mutate(|s| {
                out = Some(f(s));
                Ok(())
            });
            r.map_err(ApiError::from)?;
            out.expect("closure ran")
        } else {
            f(&mut shared.lock())
        }
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/labels/{id}", get(get_labels).put(put_labels))
        .route("/api/review/{id}", post(review))
        .route("/api/image/{id}", get(image))
        .route("/api/status", get(status))
        .with_state(state)
}

#[derive(Deserialize)]
struct QueueQuery {
    kind: Option<String>,
}

async fn queue(State(state): State<AppState>, Query(q): Query<QueueQuery>) -> ApiResult<Response> {
    let kind = match q.kind.as_deref().unwrap_or("key_annotation") {
        "key_annotation" => QueueKind::KeyAnnotation,
        "pseudo_review" => QueueKind::PseudoReview,
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("unknown queue kind {other:?}; expected key_annotation or pseudo_review"),
            ))
        }
    };
    let items = with_session(&state, false, move |s| Ok(s.queue(kind)?)).await?;
    Ok(Json(items).into_response())
}

async fn get_labels(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<LabelSet>> {
    let labels = with_session(&state, false, move |s| {
        if s.sample(&id).is_none() {
            return Err(Error::UnknownSample(id).into());
        }
        Ok(s.store().read(&id)?.unwrap_or_else(|| LabelSet::new(&id, "", Vec::new())))
    })
    .await?;
    Ok(Json(labels))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsBody {
    #[serde(default)]
    pub sample_id: Option<String>,
    pub revision: u64,
    #[serde(default = "default_annotator")]
    pub annotator: String,
    pub boxes: Vec<BoundingBox>,
}

fn default_annotator() -> String {
    "annotator".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevisionReply {
    pub sample_id: String,
    pub revision: u64,
}

async fn put_labels(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<LabelsBody>,
) -> ApiResult<Json<RevisionReply>> {
    if body.sample_id.as_ref().is_some_and(|b| *b != id) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "sample_id in body does not match the url"));
    }
    let reply = with_session(&state, true, move |s| {
        let mut labels = LabelSet::new(&id, body.annotator, body.boxes);
        labels.revision = body.revision;
        let revision = s.annotate(&labels)?;
        Ok(RevisionReply { sample_id: id, revision })
    })
    .await?;
    Ok(Json(reply))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewBody {
    pub action: ReviewAction,
    #[serde(default)]
    pub boxes: Option<Vec<BoundingBox>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewReply {
    pub sample_id: String,
    pub status: Status,
}

async fn review(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ReviewBody>,
) -> ApiResult<Json<ReviewReply>> {
    let reply = with_session(&state, true, move |s| {
        if s.sample(&id).is_none() {
            return Err(Error::UnknownSample(id).into());
        }
        if !s.config().review_mode {
            return Err(ApiError::new(StatusCode::CONFLICT, "review mode is off"));
        }
        let status = s.review(&id, body.action, body.boxes)?;
        Ok(ReviewReply { sample_id: id, status })
    })
    .await?;
    Ok(Json(reply))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let path = with_session(&state, false, move |s| Ok(s.image_path(&id)?)).await?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Preparing,
    Annotation,
    Training,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReply {
    pub iteration: usize,
    pub phase: Phase,
    pub pending_keys: usize,
    pub pools: gram_sld::journal::Pools,
    pub metrics: Vec<gram_sld::session::IterationMetrics>,
    pub stop_reason: Option<gram_sld::journal::StopReason>,
}

pub fn status_of(s: &Session) -> StatusReply {
    let p = s.progress();
    let phase = if p.terminated.is_some() {
        Phase::Terminated
    } else if !p.keys_selected {
        Phase::Preparing
    } else if s.pending_keys() > 0 || p.last_trained.is_none() {
        Phase::Annotation
    } else {
        Phase::Training
    };
    let state = s.state();
    StatusReply {
        iteration: state.iteration,
        phase,
        pending_keys: s.pending_keys(),
        pools: state.pools,
        metrics: state.metrics.clone(),
        stop_reason: p.terminated.map(|t| t.0),
    }
}

#[derive(Deserialize)]
struct StatusQuery {
    /// Long poll: wait until the status differs from this iteration.
    since: Option<usize>,
    /// Long-poll timeout in seconds.
    wait: Option<u64>,
}

async fn status(State(state): State<AppState>, Query(q): Query<StatusQuery>) -> ApiResult<Json<StatusReply>> {
    let shared = state.clone();
    let reply = tokio::task::spawn_blocking(move || match q.since {
        Some(since) => {
            let wait = Duration::from_secs(q.wait.unwrap_or(30).min(300));
            let (s, _) = shared.wait_until(wait, |s| {
                s.state().iteration != since || s.progress().terminated.is_some()
            });
            status_of(&s)
        }
        None => status_of(&shared.lock()),
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(reply))
}

/// Serves `state` on `addr` until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_types() {
        assert_eq!(content_type(Path::new("a/b.PNG")), "image/png");
        assert_eq!(content_type(Path::new("x.jpeg")), "image/jpeg");
        assert_eq!(content_type(Path::new("x")), "application/octet-stream");
    }

    #[test]
    fn error_statuses() {
        let s = |e: Error| ApiError::from(e).status;
        assert_eq!(s(Error::UnknownSample("a".into())), StatusCode::NOT_FOUND);
        assert_eq!(
            s(Error::RevisionConflict {
                sample_id: "a".into(),
                expected: 0,
                current: 1
            }),
            StatusCode::CONFLICT
        );
        assert_eq!(
            s(Error::InvalidBox {
                sample_id: "a".into(),
                index: 2,
                reason: "x".into()
            }),
            StatusCode::UNPROCESSABLE_ENTITY
        );
    }
}
