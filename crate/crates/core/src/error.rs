use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Every fallible operation in this crate returns this error type.
///
/// Variants are grouped so a caller (for example a CLI) can map them onto
/// coarse exit classes without matching each variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or map dimensions do not line up for the requested operation.
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// An argument violates the operation's contract (zero cell size,
    /// even kernel, empty input sequence, and so on).
    Argument {
        context: &'static str,
        message: String,
    },
    /// A dataset line could not be parsed. `line` is 1-based.
    Parse { line: usize, message: String },
    /// The dataset parsed but is inconsistent (duplicate observations,
    /// frames off the annotation stride, unknown scene names).
    Data { message: String },
    /// A configuration value is out of range or internally inconsistent.
    Config { message: String },
    /// A computation produced or received non-finite values.
    Numeric { context: String },
    /// A probability map could not be decoded into a position.
    Decode { message: String },
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or configuration.
    Usage,
    /// Bad or inconsistent input data.
    Data,
    /// Numeric failure (non-finite values, undecodable maps).
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Argument { .. } | Error::Config { .. } => ErrorClass::Usage,
            Error::Shape { .. } | Error::Parse { .. } | Error::Data { .. } => ErrorClass::Data,
            Error::Numeric { .. } | Error::Decode { .. } => ErrorClass::Numeric,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                context,
                expected,
                got,
            } => write!(
                f,
                "shape mismatch in {context}: expected {expected:?}, got {got:?}"
            ),
            Error::Argument { context, message } => {
                write!(f, "invalid argument in {context}: {message}")
            }
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Data { message } => write!(f, "data error: {message}"),
            Error::Config { message } => write!(f, "configuration error: {message}"),
            Error::Numeric { context } => write!(f, "numeric failure in {context}"),
            Error::Decode { message } => write!(f, "decode error: {message}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
