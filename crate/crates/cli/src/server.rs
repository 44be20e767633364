//! JSON API over a [`SessionStore`]. Model calls run on the blocking pool so a
//! slow generation never stalls other sessions.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use circle_core::simulator::{LiveError, SessionStore};
use serde::Deserialize;
use serde_json::json;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub query: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRequest {
    pub index: usize,
}

#[derive(Debug)]
pub enum ApiError {
    Live(LiveError),
    BadBody(String),
    Internal(String),
}

impl From<LiveError> for ApiError {
    fn from(e: LiveError) -> Self {
        Self::Live(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::BadBody(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            Self::Live(e) => {
                let status = match e {
                    LiveError::NotFound(_) => StatusCode::NOT_FOUND,
                    LiveError::IndexOutOfRange { .. } | LiveError::EmptyQuery => StatusCode::UNPROCESSABLE_ENTITY,
                    LiveError::Closed(_) => StatusCode::CONFLICT,
                    LiveError::Generation(_) => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, e.to_string())
            }
            Self::BadBody(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            Self::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

type Shared = Arc<SessionStore>;

async fn blocking<T: Send + 'static>(
    store: Shared,
    f: impl FnOnce(&SessionStore) -> Result<T, LiveError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

async fn create(State(store): State<Shared>, body: Result<Json<CreateRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let snap = blocking(store, move |s| s.create(&req.query)).await?;
    Ok((StatusCode::CREATED, Json(snap)).into_response())
}

async fn select(
    State(store): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<SelectRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let snap = blocking(store, move |s| s.select(&id, req.index)).await?;
    Ok(Json(snap).into_response())
}

async fn inspect(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(store.get(&id)?).into_response())
}

async fn close(State(store): State<Shared>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    store.close(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create))
        .route("/api/sessions/{id}", get(inspect).delete(close))
        .route("/api/sessions/{id}/select", post(select))
        .with_state(store)
}
