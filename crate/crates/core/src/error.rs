use alloc::string::String;
use core::fmt;

/// Errors raised by the pure numeric layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor or vector dimensions do not satisfy an operation's contract.
    ShapeError(String),
    /// A conditioning code has the wrong length for the consuming layer.
    CodeLengthError { expected: usize, got: usize },
    /// An input tensor contains NaN or infinite entries.
    NonFiniteInput(String),
    /// A task was constructed with an empty available set.
    EmptyAvailableSet,
    /// The requested target sequence is already in the available set.
    TargetNotMissing { target: usize },
    /// A sequence index falls outside `[0, n)`.
    IndexOutOfRange { index: usize, n: usize },
    /// Image too small for a windowed metric.
    TooSmall { min_dim: usize, required: usize },
    /// A stratification map is constant, so percentile split is undefined.
    DegenerateMap,
    /// A configuration value violates its documented range.
    InvalidArgument(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeError(msg) => write!(f, "shape error: {msg}"),
            Error::CodeLengthError { expected, got } => {
                write!(f, "code length error: expected {expected}, got {got}")
            }
            Error::NonFiniteInput(what) => write!(f, "non-finite input: {what}"),
            Error::EmptyAvailableSet => write!(f, "available set is empty"),
            Error::TargetNotMissing { target } => {
                write!(f, "target sequence {target} is already available")
            }
            Error::IndexOutOfRange { index, n } => {
                write!(f, "sequence index {index} out of range for n={n}")
            }
            Error::TooSmall { min_dim, required } => {
                write!(f, "image dimension {min_dim} below required {required}")
            }
            Error::DegenerateMap => write!(f, "stratification map is constant"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::ShapeError(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
