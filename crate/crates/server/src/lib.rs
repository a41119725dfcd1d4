//! HTTP front end for a [`Pipeline`].
//!
//! * `POST /retrieve` takes `{"caption": "...", "query_id": "..."}` (the id
//!   is optional) and answers with the image ids and their provenance.
//! * `GET /health` reports the index and the reachability of each provider.
//!   An unreachable provider makes the status `degraded`; the service keeps
//!   running.
//!
//! Retrieval runs on the blocking pool, since providers may make
//! synchronous HTTP calls.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use event_retriever::pipeline::{
    Degradation, ImageProvenance, Pipeline, PipelineError, ProviderStatus, StageTimings,
};
use event_retriever::{QueryCaption, ScoredItem};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

pub const DEFAULT_QUERY_ID: &str = "query";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub caption: String,
    #[serde(default)]
    pub query_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub query_id: String,
    pub image_ids: Vec<String>,
    pub provenance: Vec<ImageProvenance>,
    /// Reranked articles with their relevance scores.
    pub articles: Vec<ScoredItem>,
    pub degraded: Vec<Degradation>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStatus {
    pub count: usize,
    pub dim: usize,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    /// `ok` or `degraded`.
    pub status: String,
    pub index: IndexStatus,
    pub providers: Vec<ProviderStatus>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

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

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Query { .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

pub fn router(pipeline: Arc<Pipeline>) -> Router {
    Router::new()
        .route("/retrieve", post(retrieve))
        .route("/health", get(health))
        .with_state(pipeline)
}

async fn retrieve(
    State(pipeline): State<Arc<Pipeline>>,
    Json(req): Json<RetrieveRequest>,
) -> Result<Json<RetrieveResponse>, ApiError> {
    if req.caption.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "caption must not be empty",
        ));
    }
    let query_id = match req.query_id {
        Some(id) if id.is_empty() => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "query_id must not be empty",
            ))
        }
        Some(id) => id,
        None => DEFAULT_QUERY_ID.to_string(),
    };
    let query = QueryCaption::new(query_id, req.caption);
    let outcome = tokio::task::spawn_blocking(move || pipeline.retrieve_one(&query))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(RetrieveResponse {
        query_id: outcome.query_id,
        image_ids: outcome.image_ids,
        provenance: outcome.provenance,
        articles: outcome.articles.entries,
        degraded: outcome.degraded,
        timings: outcome.timings,
    }))
}

async fn health(State(pipeline): State<Arc<Pipeline>>) -> Json<HealthResponse> {
    let index = IndexStatus {
        count: pipeline.index().len(),
        dim: pipeline.index().dim(),
        backend: pipeline.index().backend().name().to_string(),
    };
    let providers = tokio::task::spawn_blocking(move || pipeline.provider_status())
        .await
        .unwrap_or_default();
    let ok = !providers.is_empty() && providers.iter().all(|p| p.healthy);
    Json(HealthResponse {
        status: if ok { "ok" } else { "degraded" }.to_string(),
        index,
        providers,
    })
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_listener(
    listener: TcpListener,
    pipeline: Arc<Pipeline>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "serving");
    axum::serve(listener, router(pipeline))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(pipeline: Pipeline, addr: SocketAddr) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    serve_listener(listener, Arc::new(pipeline), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
