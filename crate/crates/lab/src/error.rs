use std::path::{Path, PathBuf};

use reflow_core::Error as CoreError;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
}

impl LabError {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(what: &'static str, reason: impl Into<String>) -> Self {
        LabError::Format {
            what,
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config { .. } => 2,
            LabError::Core(e) => match e {
                CoreError::InvalidParameter { .. } | CoreError::ShapeMismatch { .. } => 2,
                CoreError::NonFinite { .. }
                | CoreError::SolverDiverged { .. }
                | CoreError::WeightUnderflow { .. }
                | CoreError::UnnormalizedPlan { .. }
                | CoreError::TooManyDropped { .. } => 3,
                _ => 1,
            },
            LabError::Io { .. } | LabError::Format { .. } => 1,
        }
    }
}

/// Attaches a path to IO errors.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| LabError::io(path, e))
    }
}
