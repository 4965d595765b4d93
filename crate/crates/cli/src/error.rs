use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Numerical {
        stage: &'static str,
        #[source]
        source: hamflow_core::Error,
    },
    #[error("hypothesis check failed: {0} (rerun with --force to continue)")]
    Hypotheses(String),
    #[error("{0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures, 1 for i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } | CliError::Hypotheses(_) | CliError::Failed(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

/// Attaches a pipeline stage to core errors.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for hamflow_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Numerical { stage, source })
    }
}
