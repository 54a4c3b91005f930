use std::convert::Infallible;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dualar_core::token::CodebookConfig;
use dualar_core::wire::{FieldError, GenerateRequest, StreamEvent};
use futures::StreamExt;
use serde::Serialize;
use tokio_stream::wrappers::UnboundedReceiverStream;

use crate::runtime::{EngineHandle, RuntimeError};

pub const NDJSON: &str = "application/x-ndjson";

#[derive(Clone)]
pub struct AppState {
    pub engine: EngineHandle,
    pub codebook: CodebookConfig,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/stats", get(stats))
        .with_state(state)
}

#[derive(Debug, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ApiError {
    BadRequest { path: String, message: String },
    Backpressure { message: String },
    Engine { message: String },
}

impl From<FieldError> for ApiError {
    fn from(e: FieldError) -> Self {
        ApiError::BadRequest { path: e.path, message: e.message }
    }
}

impl From<RuntimeError> for ApiError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Backpressure(message) => ApiError::Backpressure { message },
            RuntimeError::Invalid(message) => ApiError::BadRequest { path: String::new(), message },
            RuntimeError::Fatal(message) => ApiError::Engine { message },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::Backpressure { .. } => StatusCode::TOO_MANY_REQUESTS,
            ApiError::Engine { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self)).into_response()
    }
}

/// Parses a generate body, reporting the JSON path of the first problem.
pub fn parse_request(body: &[u8]) -> Result<GenerateRequest, FieldError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            return FieldError::new("$", inner.to_string());
        }
        let prefix = if path == "." { String::new() } else { path };
        let message = inner.to_string();
        // A missing field is reported at the enclosing object; point at the
        // field itself.
        let named = message.strip_prefix("missing field `").and_then(|rest| rest.split('`').next());
        let path = match named {
            Some(f) if prefix.is_empty() => f.to_string(),
            Some(f) => format!("{prefix}.{f}"),
            None if prefix.is_empty() => "$".to_string(),
            None => prefix,
        };
        FieldError::new(path, message)
    })
}

async fn generate(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req = parse_request(&body)?;
    let engine_req = req.to_request(&st.codebook)?;
    let rx = st.engine.submit(engine_req).await?;
    if req.stream {
        let lines = UnboundedReceiverStream::new(rx).map(|ev| Ok::<_, Infallible>(ev.to_line()));
        return Ok(([(header::CONTENT_TYPE, NDJSON)], Body::from_stream(lines)).into_response());
    }
    let events: Vec<StreamEvent> = UnboundedReceiverStream::new(rx).collect().await;
    if let Some(StreamEvent::Error { message }) = events.last() {
        if message.starts_with("engine failure") {
            return Err(ApiError::Engine { message: message.clone() });
        }
    }
    Ok(Json(events).into_response())
}

async fn stats(State(st): State<AppState>) -> Result<Response, ApiError> {
    Ok(Json(st.engine.stats().await?).into_response())
}
