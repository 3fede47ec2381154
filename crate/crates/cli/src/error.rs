use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bnprepair::Error),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::File { path: path.display().to_string(), source }
    }

    /// 1 usage, 2 data, 3 non-convergence.
    pub fn exit_code(&self) -> i32 {
        use bnprepair::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::NonConvergence { .. } | E::NotStopped { .. }) => 3,
            _ => 2,
        }
    }
}
