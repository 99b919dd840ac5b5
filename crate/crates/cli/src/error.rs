use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Core(#[from] wqcp_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    /// Wraps a core error with the config block it came from.
    pub fn field(block: &str, err: wqcp_core::Error) -> Self {
        match err {
            wqcp_core::Error::Parameter { name, reason } => CliError::Config(format!("{block}.{name}: {reason}")),
            other => CliError::Config(format!("{block}: {other}")),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
