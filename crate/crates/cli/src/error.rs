use std::path::PathBuf;

use dissipative::field::FieldError;
use dissipative::layer::LayerError;
use dissipative::stability::StabilityError;
use dissipative::train::{CheckpointError, TrainError};
use thiserror::Error;

/// Exit status for usage and I/O problems.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for solver and training failures.
pub const EXIT_NUMERIC: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Parse { .. } => EXIT_USAGE,
            CliError::Checkpoint(_) => EXIT_USAGE,
            CliError::Train(e) => match e {
                TrainError::Config(_)
                | TrainError::ConfigParse(_)
                | TrainError::UnknownPreset(_)
                | TrainError::Data(_) => EXIT_USAGE,
                _ => EXIT_NUMERIC,
            },
            CliError::Field(FieldError::Dimension { .. }) => EXIT_USAGE,
            CliError::Layer(LayerError::Field(FieldError::Dimension { .. })) => EXIT_USAGE,
            CliError::Stability(
                StabilityError::InvalidTheta(_)
                | StabilityError::InvalidTolerance(_)
                | StabilityError::GridTooSmall(_),
            ) => EXIT_USAGE,
            CliError::Layer(_) | CliError::Field(_) | CliError::Stability(_) => EXIT_NUMERIC,
        }
    }
}
