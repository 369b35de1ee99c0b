use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("duplicate site id `{0}`")]
    DuplicateSiteId(String),

    #[error("unknown column `{0}` in data header")]
    UnknownColumn(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("matrix is not positive semidefinite (jitter reached {jitter:e})")]
    NotPsd { jitter: f64 },

    #[error("risk functional `{0}` has a parameter-dependent normalizer; use the gradient score")]
    UnsupportedRiskForMle(String),

    #[error("weight function is not differentiable at z[{index}] = {value}")]
    NonDifferentiableWeight { index: usize, value: f64 },

    #[error("rejection sampler exceeded {max_iters} draws (acceptance rate {acceptance_rate:e})")]
    RejectionExhausted { max_iters: u64, acceptance_rate: f64 },

    #[error("optimizer did not converge after {iterations} iterations: {message}")]
    NoConvergence { iterations: usize, message: String },

    #[error("too few exceedances: {found} (need at least {required})")]
    TooFewExceedances { found: usize, required: usize },

    #[error("degenerate sample: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Numerical failures as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPsd { .. }
                | Error::RejectionExhausted { .. }
                | Error::NoConvergence { .. }
                | Error::Degenerate(_)
        )
    }
}
