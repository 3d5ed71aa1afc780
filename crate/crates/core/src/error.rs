use std::fmt;

/// Identifies one loss of a composite model in error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossId {
    Pretrain(usize),
    Downstream,
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossId::Pretrain(k) => write!(f, "pretraining loss {k}"),
            LossId::Downstream => write!(f, "downstream loss"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite value of {0}")]
    NonFiniteLoss(LossId),
    #[error("non-finite loss at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("batch has no labeled rows but a downstream gradient was requested")]
    EmptyLabeledSubset,
    #[error("composite gradient norm {0:e} is below the degeneracy threshold")]
    DegenerateNorm(f64),
    #[error("power iteration did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl fmt::Display, got: impl fmt::Display) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by NaN/inf arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonFiniteLoss(_) | Error::Diverged { .. } | Error::NotConverged { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
