use std::path::PathBuf;

use cxr_core::augment::AugmentError;
use cxr_core::backbone::BackboneError;
use cxr_core::evaluate::EvalError;
use cxr_core::head::HeadError;
use cxr_core::manifest::ManifestError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn missing(what: &str, path: PathBuf) -> Self {
        CliError::Io(format!("{what} not found: {}", path.display()))
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io { .. } | ManifestError::MissingDirectory(_) | ManifestError::MissingFiles(_) => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::Unwritable { .. } | AugmentError::Decode { .. } | AugmentError::Encode { .. } => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::Io { .. } | BackboneError::Decode { .. } => CliError::Io(e.to_string()),
            BackboneError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<HeadError> for CliError {
    fn from(e: HeadError) -> Self {
        match e {
            HeadError::Io { .. } => CliError::Io(e.to_string()),
            HeadError::NanLoss { .. } | HeadError::NonFinite(_) | HeadError::ZeroProbability => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidScore { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}
