//! HTTP front end of the review store.
//!
//! The store sits behind a mutex: submissions are serialized (the log has a
//! single writer) and every request holds the lock only briefly.

use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use pseudolabel::review::{Annotation, Conflict, ItemProgress, QueueItem, Rejection, ReviewStore, Stats, Verdict};
use pseudolabel::{ClassIndex, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub type SharedStore = Arc<Mutex<ReviewStore>>;

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
            Error::Annotation(Rejection::UnknownItem(_)) => StatusCode::NOT_FOUND,
            Error::Annotation(Rejection::NotAssigned { .. }) => StatusCode::FORBIDDEN,
            Error::Annotation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn lock(store: &SharedStore) -> MutexGuard<'_, ReviewStore> {
    // A panic while holding the lock cannot leave the store half-updated:
    // the log is appended before in-memory state changes.
    store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    annotator: Option<String>,
}

#[derive(Debug, Serialize)]
struct QueueResponse {
    annotator: String,
    assigned: usize,
    items: Vec<QueueItem>,
}

async fn queue(
    State(store): State<SharedStore>,
    Query(params): Query<QueueParams>,
) -> Result<Json<QueueResponse>, ApiError> {
    let annotator = params
        .annotator
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing query parameter `annotator`"))?;
    let store = lock(&store);
    if !store.assignment().annotators.contains(&annotator) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown annotator {annotator:?}"),
        ));
    }
    let items: Vec<QueueItem> = store.pending_for(&annotator).into_iter().cloned().collect();
    Ok(Json(QueueResponse {
        assigned: store.assignment().items_for(&annotator).len(),
        annotator,
        items,
    }))
}

#[derive(Debug, Serialize)]
struct ItemResponse {
    #[serde(flatten)]
    item: QueueItem,
    progress: ItemProgress,
}

async fn item(State(store): State<SharedStore>, UrlPath(id): UrlPath<String>) -> Result<Json<ItemResponse>, ApiError> {
    let store = lock(&store);
    let item = store
        .item(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown item {id:?}")))?;
    let progress = store.progress(&id).expect("queued items are assigned");
    Ok(Json(ItemResponse { item, progress }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    item_id: String,
    annotator: String,
    verdict: Verdict,
    #[serde(default)]
    corrected_label: Option<ClassIndex>,
}

#[derive(Debug, Serialize)]
struct SubmitResponse {
    progress: ItemProgress,
    stats: Stats,
}

async fn annotate(State(store): State<SharedStore>, body: Bytes) -> Result<Json<SubmitResponse>, ApiError> {
    let submission: Submission = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed annotation: {e}")))?;
    let mut store = lock(&store);
    // The timestamp is taken under the lock so log order and time order agree.
    let annotation = Annotation {
        item_id: submission.item_id,
        annotator: submission.annotator,
        verdict: submission.verdict,
        corrected_label: submission.corrected_label,
        ts: Utc::now(),
    };
    let progress = store.submit(annotation)?;
    Ok(Json(SubmitResponse {
        progress,
        stats: store.stats(),
    }))
}

async fn stats(State(store): State<SharedStore>) -> Json<Stats> {
    Json(lock(&store).stats())
}

async fn conflicts(State(store): State<SharedStore>) -> Json<Vec<Conflict>> {
    Json(lock(&store).conflicts())
}

pub fn router(store: ReviewStore, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/items/{id}", get(item))
        .route("/api/annotations", post(annotate))
        .route("/api/stats", get(stats))
        .route("/api/conflicts", get(conflicts))
        .with_state(Arc::new(Mutex::new(store)));
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves `app` on `listener` until Ctrl-C.
pub async fn run(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
