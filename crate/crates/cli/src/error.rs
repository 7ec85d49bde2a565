//! Process-level failures and their mapping onto exit codes.
//!
//! The contract: 1 for usage mistakes, 2 for bad data or files, 3 for
//! numeric failures (non-finite loss, failed gradient check).

use socprob_core::{Error as CoreError, ErrorClass};
use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: contradictory flags, unknown config keys, values
    /// that cannot be parsed.
    Usage(String),
    /// Filesystem trouble on a named path.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A file exists but its contents are not what they claim to be.
    Format { path: PathBuf, message: String },
    /// A checkpoint written by a different format revision.
    Version { path: PathBuf, got: u32 },
    /// Anything surfaced by the engine itself.
    Core(CoreError),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Format { .. } | CliError::Version { .. } => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Format { path, message } => {
                write!(f, "{}: {message}", path.display())
            }
            CliError::Version { path, got } => write!(
                f,
                "{}: checkpoint format version {got} is not supported (expected 1)",
                path.display()
            ),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Io { source, .. } => Some(source),
            CliError::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::usage("x").exit_code(), 1);
        assert_eq!(
            CliError::io("f", std::io::Error::from(std::io::ErrorKind::NotFound)).exit_code(),
            2
        );
        assert_eq!(CliError::format("f", "bad magic").exit_code(), 2);
        assert_eq!(
            CliError::Version {
                path: "f".into(),
                got: 9
            }
            .exit_code(),
            2
        );
        assert_eq!(
            CliError::Core(CoreError::Numeric {
                context: "loss".into()
            })
            .exit_code(),
            3
        );
        assert_eq!(
            CliError::Core(CoreError::Config {
                message: "bad".into()
            })
            .exit_code(),
            1
        );
        assert_eq!(
            CliError::Core(CoreError::Parse {
                line: 3,
                message: "bad".into()
            })
            .exit_code(),
            2
        );
    }
}
