use thiserror::Error;

/// Errors split by exit code: 1 for usage and configuration, 2 for runtime
/// and data problems.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(fmsd_core::Error),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) | CliError::Data(_) => 2,
        }
    }
}

impl From<fmsd_core::Error> for CliError {
    fn from(e: fmsd_core::Error) -> Self {
        use fmsd_core::Error as E;
        match e {
            E::Config(_) | E::UnknownDialect(_) | E::UnknownSymbol(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
