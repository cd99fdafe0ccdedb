use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] stillguard_core::Error),
    #[error("config {path}: {detail}")]
    Config { path: PathBuf, detail: String },
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// Process exit status: 2 usage/config, 3 missing checkpoint, 4 parse
    /// error, 5 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use stillguard_core::Error as E;
        match self {
            HarnessError::Core(e) => match e {
                E::MissingCheckpoint(_) => 3,
                E::Parse { .. } => 4,
                E::NonFiniteLoss { .. } | E::NumericDomain { .. } => 5,
                E::Io(_) | E::Config(_) | E::Usage(_) | E::Domain(_) | E::Dimension { .. } => 2,
            },
            HarnessError::Config { .. } | HarnessError::Usage(_) | HarnessError::Io { .. } => 2,
            HarnessError::Csv(_) | HarnessError::Json(_) => 4,
        }
    }
}
