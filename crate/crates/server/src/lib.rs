//! HTTP/JSON front end for [`AuthService`].
//!
//! | method | path | success |
//! |---|---|---|
//! | POST | `/api/v1/enroll` | 201 `{user_id, challenge_count, secret_text}` |
//! | POST | `/api/v1/sessions` | 201 `{session_id, total, challenge}` |
//! | POST | `/api/v1/sessions/{id}/answers` | 200 `{challenge}` or `{verdict}` |
//! | GET | `/api/v1/sessions/{id}` | 200 session status (for resuming) |
//! | GET | `/api/v1/healthz` | 200 `{status, kb_attributes, kb_concepts}` |
//!
//! Errors are `{error_code, message}` with 404 for unknown users and
//! sessions, 409 for conflicts and 422 for invalid input.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;
use zeta_core::service::{AnswerOutcome, AuthService, EnrollRequest, ServiceError};

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error_code: code.to_owned(), message: message.into() } }
    }
}

impl From<ServiceError> for ApiError {
    fn from(err: ServiceError) -> Self {
        let status = match &err {
            ServiceError::UnknownUser(_) | ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::DuplicateUser(_) | ServiceError::OutOfOrder { .. } | ServiceError::SessionClosed(_) => {
                StatusCode::CONFLICT
            }
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %err, "request failed");
        }
        Self::new(status, err.code(), err.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "ValidationError", rejection.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartBody {
    user_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerBody {
    index: usize,
    response: bool,
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    kb_attributes: usize,
    kb_concepts: usize,
}

type Shared = Arc<AuthService>;

/// Runs a service call off the async executor; calls may hit the disk.
async fn blocking<T: Send + 'static>(
    service: &Shared,
    f: impl FnOnce(&AuthService) -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ApiError> {
    let service = service.clone();
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "InternalError", e.to_string()))?
        .map_err(ApiError::from)
}

async fn enroll(
    State(service): State<Shared>,
    body: Result<Json<EnrollRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(request) = body?;
    let enrollment = blocking(&service, move |s| s.enroll(&request)).await?;
    tracing::info!(user_id = %enrollment.user_id, challenges = enrollment.challenge_count, "enrolled");
    Ok((StatusCode::CREATED, Json(enrollment)))
}

async fn start_session(
    State(service): State<Shared>,
    body: Result<Json<StartBody>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(StartBody { user_id }) = body?;
    let start = blocking(&service, move |s| s.start_session(&user_id)).await?;
    Ok((StatusCode::CREATED, Json(start)))
}

async fn answer(
    State(service): State<Shared>,
    Path(session_id): Path<String>,
    body: Result<Json<AnswerBody>, JsonRejection>,
) -> Result<Json<AnswerOutcome>, ApiError> {
    let Json(AnswerBody { index, response }) = body?;
    let outcome = blocking(&service, move |s| s.answer(&session_id, index, response)).await?;
    Ok(Json(outcome))
}

async fn session_status(
    State(service): State<Shared>,
    Path(session_id): Path<String>,
) -> Result<impl IntoResponse, ApiError> {
    let status = blocking(&service, move |s| s.session_status(&session_id)).await?;
    Ok(Json(status))
}

async fn healthz(State(service): State<Shared>) -> Json<Health> {
    let kb = service.kb();
    Json(Health { status: "ok", kb_attributes: kb.attribute_count(), kb_concepts: kb.concept_count() })
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}

pub fn router(service: Arc<AuthService>) -> Router {
    Router::new()
        .route("/api/v1/enroll", post(enroll))
        .route("/api/v1/sessions", post(start_session))
        .route("/api/v1/sessions/{id}", get(session_status))
        .route("/api/v1/sessions/{id}/answers", post(answer))
        .route("/api/v1/healthz", get(healthz))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(service)
}

/// How often open sessions are checked against the TTL.
pub const EXPIRY_SWEEP_INTERVAL: Duration = Duration::from_secs(30);

/// Serves until `shutdown` resolves, then flushes the store.
pub async fn serve(
    listener: TcpListener,
    service: Arc<AuthService>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let service = service.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(EXPIRY_SWEEP_INTERVAL);
            loop {
                tick.tick().await;
                let s = service.clone();
                match tokio::task::spawn_blocking(move || s.expire_now()).await {
                    Ok(Ok(n)) if n > 0 => tracing::info!(expired = n, "expired stale sessions"),
                    Ok(Err(e)) => tracing::warn!(error = %e, "expiry sweep failed"),
                    _ => {}
                }
            }
        })
    };
    let result = axum::serve(listener, router(service.clone())).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    let flushed = tokio::task::spawn_blocking(move || service.flush())
        .await
        .map_err(std::io::Error::other)?;
    flushed.map_err(std::io::Error::other)?;
    result
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = terminate => {},
    }
}
