use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlocError>;

#[derive(Debug, Error)]
pub enum FlocError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("argument {value} outside the admissible domain: {reason}")]
    Domain { value: f64, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("adaptive quadrature on [{a}, {b}] did not converge after {levels} refinement levels")]
    QuadratureNonConvergence { a: f64, b: f64, levels: usize },

    #[error("positivity could not be restored after {halvings} step halvings")]
    PositivityFailure { halvings: u32 },

    #[error("transport stability bound requires {required} sub-steps (limit {limit})")]
    SubstepLimit { required: f64, limit: u64 },

    #[error("ODE step size underflow at t = {t} (h = {h})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("stochastic event rate overflow: {0}")]
    RateOverflow(String),

    #[error("coefficient cache: {0}")]
    CacheFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl FlocError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        FlocError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn domain(value: f64, reason: impl Into<String>) -> Self {
        FlocError::Domain {
            value,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlocError::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors that stem from numerics rather than from user input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FlocError::QuadratureNonConvergence { .. }
                | FlocError::PositivityFailure { .. }
                | FlocError::SubstepLimit { .. }
                | FlocError::StepUnderflow { .. }
                | FlocError::RateOverflow(_)
        )
    }
}
