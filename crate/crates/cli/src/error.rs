use std::path::{Path, PathBuf};

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("truth bundles differ: {0}")]
    TruthMismatch(String),
    #[error("budget exhausted after {runs} forward runs; partial results written to {}", out.display())]
    BudgetExhausted { runs: u64, out: PathBuf },
    #[error(transparent)]
    Core(#[from] hierassim::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BudgetExhausted { .. } => 3,
            CliError::Core(hierassim::Error::BudgetExhausted { .. }) => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            _ => 2,
        }
    }
}
