use thiserror::Error;

/// Exit code for configuration, input and shape errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for numerical failures and failed gradient checks.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// A config field, input file or data shape is unusable.
    #[error("{message}")]
    Config { field: String, message: String },

    /// Training or evaluation hit a numerical failure.
    #[error("{source}")]
    Numerical {
        stage: String,
        #[source]
        source: autogp::Error,
    },

    /// A diagnostic ran to completion and reported a failure.
    #[error("{message}")]
    CheckFailed { stage: String, message: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Routes a library error by kind: numerical failures exit with 3,
    /// everything else is an input problem attributed to `stage`.
    pub fn from_core(stage: impl Into<String>, e: autogp::Error) -> Self {
        let stage = stage.into();
        match e {
            autogp::Error::NotPositiveDefinite { .. } | autogp::Error::NonFinite { .. } => {
                CliError::Numerical { stage, source: e }
            }
            other => CliError::Config {
                field: stage,
                message: other.to_string(),
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Numerical { .. } | CliError::CheckFailed { .. } => EXIT_NUMERICAL,
        }
    }

    fn location(&self) -> &str {
        match self {
            CliError::Config { field, .. } => field,
            CliError::Numerical { stage, .. } | CliError::CheckFailed { stage, .. } => stage,
        }
    }

    /// The single machine-readable line written to stderr.
    pub fn report_line(&self) -> String {
        let message = self.to_string().replace(['\n', '\r'], " ");
        format!("ERROR {} {}: {}", self.exit_code(), self.location(), message)
    }
}

/// Attaches a stage name to library results.
pub trait Stage<T> {
    fn stage(self, stage: &str) -> CliResult<T>;
}

impl<T> Stage<T> for autogp::Result<T> {
    fn stage(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError::from_core(stage, e))
    }
}
