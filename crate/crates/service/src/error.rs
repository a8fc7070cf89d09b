use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Errors surfaced by the service. Every variant maps to one HTTP status and
/// one stable `code` string.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),

    #[error("{message}")]
    Validation { message: String, details: Value },

    #[error("{message}")]
    Conflict { message: String, details: Value },

    #[error("unknown labels: {}", .0.join(", "))]
    UnknownLabels(Vec<String>),

    #[error("model `{0}` is training; retry shortly")]
    Busy(String),

    #[error("no unlabeled instances left in pool `{0}`")]
    EmptyPool(String),

    #[error("batch of {size} exceeds the limit of {limit}")]
    BatchTooLarge { size: usize, limit: usize },

    #[error("malformed request: {0}")]
    BadRequest(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] fewloop_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// JSON error payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub details: Value,
}

impl ServiceError {
    pub fn validation(message: impl Into<String>, details: Value) -> Self {
        ServiceError::Validation {
            message: message.into(),
            details,
        }
    }

    pub fn conflict(message: impl Into<String>, details: Value) -> Self {
        ServiceError::Conflict {
            message: message.into(),
            details,
        }
    }

    pub fn code(&self) -> &'static str {
        use fewloop_core::Error as E;
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Validation { .. } => "validation_error",
            ServiceError::Conflict { .. } => "conflict",
            ServiceError::UnknownLabels(_) => "unknown_label",
            ServiceError::Busy(_) => "busy",
            ServiceError::EmptyPool(_) => "empty_pool",
            ServiceError::BatchTooLarge { .. } => "batch_too_large",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Config(_) => "config_error",
            ServiceError::Core(e) => match e {
                E::Conflict(_) => "conflict",
                E::UnknownLabel(_) => "unknown_label",
                E::UnknownStrategy(_) => "unknown_strategy",
                E::EncoderMismatch { .. } => "encoder_mismatch",
                E::Parse { .. } | E::InvalidInput(_) | E::DimensionMismatch { .. } | E::Unsupported(_) => {
                    "validation_error"
                }
                E::Io(_) | E::Serde(_) => "internal",
            },
            ServiceError::Io(_) | ServiceError::Json(_) | ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" | "empty_pool" | "encoder_mismatch" => StatusCode::CONFLICT,
            "busy" => StatusCode::SERVICE_UNAVAILABLE,
            "batch_too_large" => StatusCode::PAYLOAD_TOO_LARGE,
            "bad_request" => StatusCode::BAD_REQUEST,
            "validation_error" | "unknown_label" | "unknown_strategy" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn details(&self) -> Value {
        match self {
            ServiceError::Validation { details, .. } | ServiceError::Conflict { details, .. } => details.clone(),
            ServiceError::UnknownLabels(labels) => serde_json::json!({ "labels": labels }),
            ServiceError::BatchTooLarge { size, limit } => serde_json::json!({ "size": size, "limit": limit }),
            _ => Value::Null,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
            details: self.details(),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() && !matches!(self, ServiceError::Busy(_)) {
            tracing::error!(error = %self, "request failed");
        }
        let mut response = (status, Json(self.body())).into_response();
        if matches!(self, ServiceError::Busy(_)) {
            response
                .headers_mut()
                .insert(header::RETRY_AFTER, header::HeaderValue::from_static("1"));
        }
        response
    }
}
