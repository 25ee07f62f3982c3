use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VtpError {
    #[error("{0}")]
    Config(String),

    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{0}")]
    Core(#[from] vtp_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<VtpError>,
    },
}

pub type Result<T, E = VtpError> = std::result::Result<T, E>;

impl VtpError {
    pub fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Self::Stage { .. } => e,
            e => Self::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Category used for the CLI's single-line failure report.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Checkpoint { .. } | Self::Io { .. } => "checkpoint",
            Self::Core(vtp_core::Error::NumericalAbort { .. }) => "numerical",
            Self::Core(_) => "config",
            Self::Stage { source, .. } => source.kind(),
        }
    }

    /// 1: configuration, 2: checkpoint / file, 3: numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "checkpoint" => 2,
            "numerical" => 3,
            _ => 1,
        }
    }
}
