use thiserror::Error;

/// Errors raised across the audit pipeline.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backend capability missing: {0}")]
    Capability(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("unsatisfiable constraint: {0}")]
    Unsatisfiable(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<AuditError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl AuditError {
    pub fn in_stage(self, stage: &str) -> AuditError {
        AuditError::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, AuditError>;
