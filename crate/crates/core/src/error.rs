//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, UltraError>;

/// Everything that can go wrong in the pipeline.
///
/// Variants are coarse on purpose: callers branch on the kind (argument
/// problem, shape problem, I/O, ...) and the message carries the specifics.
#[derive(Debug, thiserror::Error)]
pub enum UltraError {
    /// A value violates a documented precondition.
    #[error("{what}")]
    InvalidArgument { what: String },

    /// Two containers that must agree in length do not.
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    /// An operation that needs at least one element got none.
    #[error("{what} must not be empty")]
    EmptyInput { what: String },

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// A statistic is undefined because some variance component is zero.
    #[error("degenerate variance: {component}")]
    DegenerateVariance { component: String },

    /// Training produced a non-finite loss and aborted.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    /// A serialized artifact (dataset, checkpoint, config) failed to parse.
    /// `offset` is a byte offset for binary formats and a 1-based line
    /// number for text formats.
    #[error("parse error at {offset}: {what}")]
    Parse { offset: u64, what: String },

    /// A serialized artifact carries a format version this build cannot read.
    #[error("{what}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        what: String,
        found: u16,
        expected: u16,
    },

    /// Too many bootstrap resamples had an undefined metric value.
    #[error("bootstrap: {skipped} of {total} resamples had an undefined metric (limit is 10%)")]
    BootstrapUndefined { skipped: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl UltraError {
    pub(crate) fn invalid(what: impl Into<String>) -> Self {
        UltraError::InvalidArgument { what: what.into() }
    }

    pub(crate) fn mismatch(what: impl Into<String>, expected: usize, got: usize) -> Self {
        UltraError::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn empty(what: impl Into<String>) -> Self {
        UltraError::EmptyInput { what: what.into() }
    }
}
