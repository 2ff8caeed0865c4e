use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use cnnprune::Error;
use serde::Serialize;

/// JSON error body: `{code, message, detail}`.
#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: serde_json::Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: serde_json::Value::Null,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "session_busy", "session busy")
    }

    fn with_detail(mut self, detail: impl Serialize) -> Self {
        self.detail = serde_json::to_value(detail).unwrap_or_default();
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::NodeNotFound(id) => Self::not_found(message).with_detail(serde_json::json!({ "node_id": id })),
            Error::InvalidPlan(v) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_plan", message).with_detail(v)
            }
            Error::UnknownFilter(f) | Error::NotInPlan(f) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_plan", message).with_detail(f)
            }
            Error::PlanTooLarge { .. } | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument", message)
            }
            Error::NonInformativePair(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "non_informative_pair", message)
            }
            Error::Cancelled => Self::new(StatusCode::CONFLICT, "cancelled", message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
