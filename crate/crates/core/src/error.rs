use std::path::PathBuf;

/// Errors raised anywhere in the core stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible. Both shapes are reported.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    /// Non-finite input where finite values are required.
    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    /// A value lies outside its admissible range (e.g. pixels outside [0, 1]).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid construction parameters (strides, head splits, schedules, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The call contract was violated (non-scalar loss, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed binary or text input.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    /// A required checkpoint is absent.
    #[error("missing checkpoint {0}; run `train` first")]
    MissingCheckpoint(PathBuf),

    /// The attack objective became NaN or infinite.
    #[error("non-finite loss {value} at PGD iteration {iteration}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
