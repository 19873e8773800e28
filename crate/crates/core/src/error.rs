use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("too few samples: need at least {needed}, found {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("state diverged at step {step}")]
    Divergence { step: u64, state: Vec<f64> },

    #[error("per-phase climatology table is missing")]
    MissingPhaseTable,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("loss became NaN at iteration {iteration} (last finite loss {last_loss})")]
    NanLoss { iteration: usize, last_loss: f64 },

    #[error("undefined quantity: {0}")]
    Undefined(&'static str),

    #[error("rank deficient: requested {requested} modes, numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("insufficient validation cases: need {needed}, have {found}")]
    InsufficientCases { needed: usize, found: usize },
}

impl Error {
    pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::DimMismatch { expected, found })
        }
    }
}
