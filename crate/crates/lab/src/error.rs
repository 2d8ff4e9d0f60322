use thiserror::Error;

/// Failures of a lab command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Numerical {
        stage: &'static str,
        #[source]
        source: sild::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("verdict failed: {0}")]
    Verdict(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Numerical { .. } | LabError::Io { .. } => 3,
            LabError::Verdict(_) => 4,
        }
    }
}

/// Tags a core error with the stage that produced it.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T, LabError>;
}

impl<T> StageContext<T> for sild::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, LabError> {
        self.map_err(|source| LabError::Numerical { stage, source })
    }
}
