use thiserror::Error;

use crate::autodiff::AdError;
use crate::distributions::DistError;
use crate::nets::NetError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("oracle infeasible: {0}")]
    OracleInfeasible(String),
    #[error("not an affine scalar family: {0}")]
    NotAffine(String),
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("non-finite ELBO term at sample {sample}: {detail}")]
    NonFiniteTerm { sample: usize, detail: String },
    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGradient { step: usize, detail: String },
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by arithmetic blowing up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteTerm { .. } | Error::NonFiniteGradient { .. }
        )
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Result<(), Error> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension { what, expected, got })
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
