use std::fmt;

use synthloop_core::Error as CoreError;

/// Failures surfaced by the command line, grouped by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags, config file or parameter combination (exit 2).
    Config(String),
    /// Unreadable or malformed input, including CSV rows and labels (exit 3).
    Data(String),
    /// A fit, factorization or Monte Carlo estimate failed (exit 4).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn parse(line: u64, msg: impl fmt::Display) -> Self {
        CliError::Data(format!("parse error on line {line}: {msg}"))
    }

    pub fn label(msg: impl fmt::Display) -> Self {
        CliError::Data(format!("label error: {msg}"))
    }

    pub fn io(what: &str, e: std::io::Error) -> Self {
        CliError::Data(format!("{what}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::Dimension { .. } | CoreError::UnsupportedScheme(_) => {
                CliError::Config(e.to_string())
            }
            CoreError::Support(_) | CoreError::Empty(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
