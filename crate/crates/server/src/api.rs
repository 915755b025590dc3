use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use agentloom_core::engine::{EngineError, InstantiateError};
use agentloom_core::schema::SchemaError;
use agentloom_core::store::StoreError;

/// Body of every JSON response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub status: EnvelopeStatus,
    pub data: Value,
    pub message: String,
    /// Machine-readable error code; present on errors only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeStatus {
    Ok,
    Error,
}

impl Envelope {
    pub fn ok(data: impl Serialize) -> Self {
        Envelope {
            status: EnvelopeStatus::Ok,
            data: serde_json::to_value(data).expect("response data serializes"),
            message: "ok".into(),
            code: None,
        }
    }
}

pub(crate) fn ok(data: impl Serialize) -> Response {
    (StatusCode::OK, Json(Envelope::ok(data))).into_response()
}

pub(crate) fn created(data: impl Serialize) -> Response {
    (StatusCode::CREATED, Json(Envelope::ok(data))).into_response()
}

/// An error response: HTTP status, code, message and optional details.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub data: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            data: Value::Null,
        }
    }

    pub fn with_data(mut self, data: impl Serialize) -> Self {
        self.data = serde_json::to_value(data).expect("error data serializes");
        self
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Envelope {
            status: EnvelopeStatus::Error,
            data: self.data,
            message: self.message,
            code: Some(self.code.to_string()),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::NotFound { kind, id } => {
                ApiError::not_found(message).with_data(json!({"kind": kind, "id": id}))
            }
            StoreError::Invalid { report, .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", message).with_data(report)
            }
            StoreError::Schema(e) => e.into(),
            StoreError::Conflict { referrers, .. } => {
                ApiError::new(StatusCode::CONFLICT, "conflict", message).with_data(json!({"referrers": referrers}))
            }
            StoreError::Unsupported(_) => ApiError::new(StatusCode::BAD_REQUEST, "unsupported", message),
            StoreError::Open { .. } | StoreError::Database(_) | StoreError::Corrupt { .. } => {
                tracing::error!(error = %message, "storage failure");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", message)
            }
        }
    }
}

impl From<SchemaError> for ApiError {
    fn from(e: SchemaError) -> Self {
        let message = e.to_string();
        let data = match &e {
            SchemaError::Syntax { line, column, .. } => json!({"line": line, "column": column}),
            SchemaError::Schema { path, .. } => json!({"path": path}),
            SchemaError::UnsupportedVersion { found, supported } => {
                json!({"found": found, "supported": supported})
            }
            SchemaError::Invalid(report) => serde_json::to_value(report).expect("reports serialize"),
        };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", message).with_data(data)
    }
}

impl From<InstantiateError> for ApiError {
    fn from(e: InstantiateError) -> Self {
        let data = json!({"entity_id": e.entity_id()});
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "instantiation_error", e.to_string()).with_data(data)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let code = match e {
            EngineError::EmptyTask => "empty_task",
            _ => "engine_error",
        };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

/// Parses a JSON request body, reporting failures in the envelope format.
pub(crate) fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", format!("invalid JSON body: {e}"))
            .with_data(json!({"line": e.line(), "column": e.column()}))
    })?;
    agentloom_core::schema::from_value_with_path(value).map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TaskRequest {
    pub task: String,
}

impl TaskRequest {
    pub(crate) fn parse(body: &[u8]) -> Result<String, ApiError> {
        let req: TaskRequest = parse_body(body)?;
        if req.task.trim().is_empty() {
            return Err(EngineError::EmptyTask.into());
        }
        Ok(req.task)
    }
}
