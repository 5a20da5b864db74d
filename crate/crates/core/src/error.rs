use std::fmt;

use serde::{Deserialize, Serialize};

/// Machine-readable error codes shared by every layer and the HTTP API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Validation,
    BadFilter,
    SchemaMismatch,
    Unauthorized,
    Forbidden,
    NotFound,
    Conflict,
    StaleLease,
    Corrupt,
    EmptyInput,
    MixedInput,
    InsufficientSteps,
    InsufficientPose,
    ModelNotFound,
    Unavailable,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Validation => "VALIDATION",
            ErrorCode::BadFilter => "BAD_FILTER",
            ErrorCode::SchemaMismatch => "SCHEMA_MISMATCH",
            ErrorCode::Unauthorized => "UNAUTHORIZED",
            ErrorCode::Forbidden => "FORBIDDEN",
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::Conflict => "CONFLICT",
            ErrorCode::StaleLease => "STALE_LEASE",
            ErrorCode::Corrupt => "CORRUPT",
            ErrorCode::EmptyInput => "EMPTY_INPUT",
            ErrorCode::MixedInput => "MIXED_INPUT",
            ErrorCode::InsufficientSteps => "INSUFFICIENT_STEPS",
            ErrorCode::InsufficientPose => "INSUFFICIENT_POSE",
            ErrorCode::ModelNotFound => "MODEL_NOT_FOUND",
            ErrorCode::Unavailable => "UNAVAILABLE",
            ErrorCode::Internal => "INTERNAL",
        }
    }

    /// HTTP status used when this code crosses the API boundary.
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::Validation
            | ErrorCode::BadFilter
            | ErrorCode::SchemaMismatch
            | ErrorCode::EmptyInput
            | ErrorCode::MixedInput
            | ErrorCode::InsufficientSteps
            | ErrorCode::InsufficientPose => 400,
            ErrorCode::Unauthorized => 401,
            ErrorCode::Forbidden => 403,
            ErrorCode::NotFound | ErrorCode::ModelNotFound => 404,
            ErrorCode::Conflict | ErrorCode::StaleLease => 409,
            ErrorCode::Unavailable => 503,
            ErrorCode::Corrupt | ErrorCode::Internal => 500,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The error body carried everywhere: `{code, message}` on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct HgError {
    pub code: ErrorCode,
    pub message: String,
}

impl HgError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Validation, message)
    }

    pub fn not_found(what: impl fmt::Display) -> Self {
        Self::new(ErrorCode::NotFound, format!("{what} not found"))
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Forbidden, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Conflict, message)
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::SchemaMismatch, message)
    }

    pub fn internal(message: impl fmt::Display) -> Self {
        Self::new(ErrorCode::Internal, message.to_string())
    }
}

pub type Result<T, E = HgError> = std::result::Result<T, E>;
