use hg_core::{ErrorCode, HgError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("need at least 2 step durations, got {0}")]
    InsufficientSteps(usize),
    #[error("insufficient pose coverage: {0}")]
    InsufficientPose(String),
    #[error("model not found: {0}")]
    ModelNotFound(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
}

impl AnalyticError {
    pub fn code(&self) -> ErrorCode {
        match self {
            AnalyticError::EmptyInput(_) => ErrorCode::EmptyInput,
            AnalyticError::InsufficientSteps(_) => ErrorCode::InsufficientSteps,
            AnalyticError::InsufficientPose(_) => ErrorCode::InsufficientPose,
            AnalyticError::ModelNotFound(_) => ErrorCode::ModelNotFound,
            AnalyticError::InvalidModel(_) => ErrorCode::Validation,
            AnalyticError::Schema(_) => ErrorCode::SchemaMismatch,
        }
    }
}

impl From<AnalyticError> for HgError {
    fn from(e: AnalyticError) -> Self {
        HgError::new(e.code(), e.to_string())
    }
}

impl From<HgError> for AnalyticError {
    fn from(e: HgError) -> Self {
        match e.code {
            ErrorCode::EmptyInput => AnalyticError::EmptyInput(e.message),
            _ => AnalyticError::Schema(e.message),
        }
    }
}
