//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("cannot L2-normalize a zero-norm vector")]
    ZeroNorm,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("solver exhausted {max_steps} steps integrating [{t0}, {t1}]")]
    MaxStepsExceeded { t0: f64, t1: f64, max_steps: usize },

    #[error("solver instability: non-finite state at t={t} while integrating [{t0}, {t1}]")]
    Instability { t: f64, t0: f64, t1: f64 },

    #[error("training diverged at epoch {epoch}, step {step}: {cause}")]
    Divergence {
        epoch: usize,
        step: usize,
        cause: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    CheckpointMismatch(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty task split: {0}")]
    EmptySplit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Whether this error is a numerical-stability observable (NaN, blowup,
    /// step exhaustion) rather than a usage or programming error. Training
    /// loops convert these into recorded divergence events.
    pub fn is_instability(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Instability { .. }
                | Error::MaxStepsExceeded { .. }
                | Error::ZeroNorm
                | Error::Divergence { .. }
        )
    }

    /// Process exit code associated with this error when surfaced by the CLI.
    ///
    /// 2 = config error, 3 = divergence/instability, 4 = incompatible or
    /// corrupt checkpoint, 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } | Error::Instability { .. } | Error::MaxStepsExceeded { .. } => 3,
            Error::Checkpoint(_) | Error::CheckpointMismatch(_) => 4,
            _ => 1,
        }
    }
}
