use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;
use trace_auth::stroke::StrokeError;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    InvalidDrawing(StrokeError),
    #[error("drawing has no points")]
    EmptyDrawing,
    #[error("invalid request body: {0}")]
    BadRequest(String),
    #[error("participant `{0}` has no stored drawings")]
    UnknownParticipant(String),
    #[error("participant `{0}` has no published model")]
    NoModel(String),
    #[error("job `{0}` not found")]
    UnknownJob(String),
    #[error("participant `{participant}` already has active job `{job_id}`")]
    JobActive { participant: String, job_id: String },
    #[error("participant `{participant}` has {found} drawings, enrollment needs {needed}")]
    InsufficientData { participant: String, found: usize, needed: usize },
    #[error("sequence token is unknown, used or expired; restart the sequence")]
    SequenceExpired,
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::InvalidDrawing(_) | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::EmptyDrawing | ApiError::InsufficientData { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::UnknownParticipant(_) | ApiError::NoModel(_) | ApiError::UnknownJob(_) => StatusCode::NOT_FOUND,
            ApiError::JobActive { .. } => StatusCode::CONFLICT,
            ApiError::SequenceExpired => StatusCode::GONE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::InvalidDrawing(StrokeError::MalformedJson(_)) => "malformed_json",
            ApiError::InvalidDrawing(StrokeError::NonFiniteCoordinate { .. }) => "non_finite_coordinate",
            ApiError::InvalidDrawing(StrokeError::LabelOutOfRange(_)) => "label_out_of_range",
            ApiError::InvalidDrawing(StrokeError::TimestampOrder { .. }) => "timestamp_order",
            ApiError::InvalidDrawing(_) => "schema_violation",
            ApiError::EmptyDrawing => "empty_drawing",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::UnknownParticipant(_) => "unknown_participant",
            ApiError::NoModel(_) => "no_model",
            ApiError::UnknownJob(_) => "unknown_job",
            ApiError::JobActive { .. } => "job_active",
            ApiError::InsufficientData { .. } => "insufficient_data",
            ApiError::SequenceExpired => "sequence_expired",
            ApiError::Internal(_) => "internal",
        }
    }

    fn field(&self) -> Option<&str> {
        match self {
            ApiError::InvalidDrawing(StrokeError::SchemaViolation { field, .. })
            | ApiError::InvalidDrawing(StrokeError::NonFiniteCoordinate { field }) => Some(field),
            ApiError::InvalidDrawing(StrokeError::LabelOutOfRange(_)) => Some("digit"),
            ApiError::InvalidDrawing(StrokeError::TimestampOrder { .. }) => Some("strokes"),
            _ => None,
        }
    }
}

impl From<StrokeError> for ApiError {
    fn from(e: StrokeError) -> Self {
        match e {
            StrokeError::EmptyDrawing => ApiError::EmptyDrawing,
            StrokeError::IoFailure { .. } => ApiError::Internal(e.to_string()),
            other => ApiError::InvalidDrawing(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body { error: self.code(), message: self.to_string(), field: self.field() };
        (self.status(), Json(body)).into_response()
    }
}
