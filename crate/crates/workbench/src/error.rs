//! Error type carrying the process exit code.

use std::fmt;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    /// Bad configuration, unparsable input or a file that cannot be read.
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn degenerate(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DEGENERATE,
            message: message.into(),
        }
    }

    /// Prefix the message with what was being done.
    pub fn context(self, what: impl fmt::Display) -> Self {
        CliError {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<vbphys::Error> for CliError {
    fn from(e: vbphys::Error) -> Self {
        use vbphys::Error::*;
        let code = match e {
            Validation(_) | Io { .. } | Parse { .. } => EXIT_CONFIG,
            Numerical(_) => EXIT_NUMERICAL,
            DegenerateFit(_) | NonConvergence(_) => EXIT_DEGENERATE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}
