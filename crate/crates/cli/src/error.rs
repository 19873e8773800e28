use std::path::Path;

use thiserror::Error;

/// Failure of a command, classified by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("state diverged at step {step}")]
    Diverged { step: u64, state: Vec<f64> },

    #[error("i/o: {0}")]
    Io(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Numerical(_) | CliError::Diverged { .. } => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<gap_core::Error> for CliError {
    fn from(e: gap_core::Error) -> Self {
        use gap_core::Error as E;
        match e {
            E::Divergence { step, state } => CliError::Diverged { step, state },
            E::NonFinite(_)
            | E::NanLoss { .. }
            | E::NotPositiveDefinite(_)
            | E::RankDeficient { .. }
            | E::Undefined(_)
            | E::ZeroVariance(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
