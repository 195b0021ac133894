use std::io;
use std::path::PathBuf;

/// Errors from file formats and experiment orchestration.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Every violated constraint, in schema order.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing inputs: {}", .0.join(", "))]
    MissingInputs(Vec<String>),
    #[error(transparent)]
    Core(#[from] bcrl_core::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        HarnessError::Format { path: path.into(), reason: reason.into() }
    }

    /// Process exit status: 2 for invalid input, 3 for a numeric abort,
    /// 1 for I/O and format failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Core(bcrl_core::Error::NonFinite { .. }) => 3,
            HarnessError::Core(_) => 2,
            HarnessError::Format { .. } | HarnessError::Io { .. } | HarnessError::MissingInputs(_) => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
