use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing artifact: {what} (run `ctraj {stage}` first)")]
    MissingArtifact { what: String, stage: String },
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
    #[error("non-deterministic output: {0}")]
    NonDeterministic(String),
    #[error(transparent)]
    Core(#[from] ctraj_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::ConfigParse(_) => "config_parse",
            CliError::InvalidConfig(_) => "invalid_config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::FingerprintMismatch(_) => "fingerprint_mismatch",
            CliError::NonDeterministic(_) => "non_deterministic",
            CliError::Core(_) => "stage_failed",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { code: self.code(), message: self.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse(_) | CliError::InvalidConfig(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::FingerprintMismatch(_) | CliError::NonDeterministic(_) => 4,
            _ => 1,
        }
    }
}
