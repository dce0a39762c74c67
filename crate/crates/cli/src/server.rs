//! HTTP front of the curation service.
//!
//! ```text
//! GET  /api/trajectories                    summaries with curated status
//! GET  /api/trajectories/{id}               keyframes, candidates, curation
//! GET  /api/trajectories/{id}/frames/{k}    PNG
//! POST /api/trajectories/{id}/curation      {"selected": [...], "curator": "..."}
//! ```

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use paravla_core::instruction::{CurationRequest, CurationService, InstructionError};
use serde_json::json;

type Shared = Arc<CurationService>;

struct ApiError(InstructionError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            InstructionError::NotFound(_) => StatusCode::NOT_FOUND,
            InstructionError::InvalidCuration(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

/// Store access is blocking file I/O; keep it off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, InstructionError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.expect("store task panicked").map_err(ApiError)
}

async fn list(State(svc): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(blocking(move || svc.list()).await?))
}

async fn detail(State(svc): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(blocking(move || svc.detail(&id)).await?))
}

async fn frame(State(svc): State<Shared>, Path((id, k)): Path<(String, usize)>) -> Result<impl IntoResponse, ApiError> {
    let png = blocking(move || svc.frame_png(&id, k)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

async fn curate(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<CurationRequest>,
) -> Result<impl IntoResponse, ApiError> {
    let saved = blocking(move || svc.submit(&id, req)).await?;
    log::info!("curated {} ({} selected by {})", saved.trajectory_id, saved.selected.len(), saved.curator);
    Ok(Json(saved))
}

/// API routes, plus the static UI bundle at `/` when `ui` is given.
pub fn router(svc: Shared, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/trajectories", get(list))
        .route("/api/trajectories/{id}", get(detail))
        .route("/api/trajectories/{id}/frames/{k}", get(frame))
        .route("/api/trajectories/{id}/curation", post(curate))
        .with_state(svc);
    match ui {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Bind `addr` and serve until ctrl-c. `on_bound` receives the actual
/// address (useful with port 0).
pub async fn serve(
    svc: CurationService,
    addr: SocketAddr,
    ui: Option<PathBuf>,
    on_bound: impl FnOnce(SocketAddr),
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(Arc::new(svc), ui))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
