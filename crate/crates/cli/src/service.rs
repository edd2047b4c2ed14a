//! HTTP+JSON labeling service over a [`RunHandle`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gflowhf::harness::{GradeSubmission, RunHandle, SubmitError};
use serde::{Deserialize, Serialize};

/// Grade as sent by a client; wider than the stored type so out-of-range
/// values get a proper 422.
#[derive(Debug, Deserialize)]
struct LabelIn {
    episode_id: u64,
    grade: i64,
}

#[derive(Debug, Serialize)]
struct Accepted {
    accepted: usize,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, reason: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: reason.into() })).into_response()
}

pub fn router(handle: Arc<RunHandle>) -> Router {
    Router::new()
        .route("/api/pending", get(pending))
        .route("/api/status", get(status))
        .route("/api/answers", get(answers))
        .route("/api/metrics", get(metrics))
        .route("/api/labels", post(labels))
        .with_state(handle)
}

async fn pending(State(h): State<Arc<RunHandle>>) -> Response {
    Json(h.pending()).into_response()
}

async fn status(State(h): State<Arc<RunHandle>>) -> Response {
    Json(h.status()).into_response()
}

async fn answers(State(h): State<Arc<RunHandle>>) -> Response {
    Json(h.answers()).into_response()
}

async fn metrics(State(h): State<Arc<RunHandle>>) -> Response {
    Json(h.metrics()).into_response()
}

async fn labels(State(h): State<Arc<RunHandle>>, body: Result<Json<Vec<LabelIn>>, JsonRejection>) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(e.status(), e.body_text()),
    };
    let mut subs = Vec::with_capacity(body.len());
    for l in &body {
        match u8::try_from(l.grade) {
            Ok(grade) => subs.push(GradeSubmission {
                episode_id: l.episode_id,
                grade,
            }),
            Err(_) => {
                return error(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("episode {}: grade {} outside 1..=5", l.episode_id, l.grade),
                )
            }
        }
    }
    match h.submit_labels(&subs) {
        Ok(accepted) => Json(Accepted { accepted }).into_response(),
        Err(e) => {
            let code = match e {
                SubmitError::InvalidGrade { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                SubmitError::UnknownEpisode(_) => StatusCode::NOT_FOUND,
                SubmitError::Duplicate(_) => StatusCode::CONFLICT,
            };
            error(code, e.to_string())
        }
    }
}

/// Binds `addr` and serves until the process exits. Returns the bound
/// address, which differs from `addr` when its port is 0.
pub fn spawn(handle: Arc<RunHandle>, addr: &str) -> anyhow::Result<SocketAddr> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || {
        runtime.block_on(async move {
            if let Err(e) = axum::serve(listener, router(handle)).await {
                log::error!("label service stopped: {e}");
            }
        })
    });
    log::info!("label service listening on http://{local}");
    Ok(local)
}
