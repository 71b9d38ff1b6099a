use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Only odd kernel sizes are supported for "same" padding.
    #[error("unsupported kernel size {0}: must be odd")]
    UnsupportedKernel(usize),
    /// A caller violated an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),
    /// A configuration value is out of its valid range.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Non-finite values were produced at the named stage.
    #[error("numerical failure at {stage}: {detail}")]
    Numerical { stage: String, detail: String },
    /// A subject id is not registered with the model.
    #[error("unknown subject {0:?}")]
    UnknownSubject(String),
    /// The input is too short for the requested transform.
    #[error("input too short: {0}")]
    TooShort(String),
    /// Windowing produced no complete window.
    #[error("no complete windows: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
