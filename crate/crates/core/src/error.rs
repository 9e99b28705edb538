//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes do not conform for an operation.
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is invalid (caught at build time).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An API was called in a state it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// Synthetic data generation could not produce a valid dataset.
    #[error("generation error: {0}")]
    Generation(String),

    /// A metric is undefined for the given inputs (e.g. no positive labels).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Training aborted (NaN loss, empty dataset, ...).
    #[error("training error: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
