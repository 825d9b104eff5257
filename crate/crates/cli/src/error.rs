use thiserror::Error;

/// CLI failures, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while doing the work. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
        }
    }
}

impl From<mvnad::Error> for CliError {
    fn from(e: mvnad::Error) -> Self {
        use mvnad::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_)
            | E::ShapeMismatch { .. }
            | E::RankDeficient { .. }
            | E::Mvnt(_)
            | E::Calibration { .. }
            | E::UnsupportedDistortion(_)
            | E::Format { .. }
            | E::Untrained => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub(crate) fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}
