use agf_core::AgfError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] AgfError),
    #[error("comparison failed: {0}")]
    Comparison(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 config, 3 numerical, 4 comparison, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::SchemaMismatch(_) => 2,
            Self::Numerical(_) => 3,
            Self::Comparison(_) => 4,
            Self::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::SchemaMismatch(_) => "schema",
            Self::Numerical(_) => "numerical",
            Self::Comparison(_) => "comparison",
            Self::Io(_) => "io",
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Io(std::io::Error::other(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io(std::io::Error::other(e))
    }
}
