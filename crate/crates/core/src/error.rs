use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported mesh format: {0}")]
    Format(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("mesh has no boundary loop")]
    NoBoundary,

    #[error("mesh has {count} boundary loops, expected exactly one")]
    MultipleBoundaryLoops { count: usize },

    #[error("no shared boundary found (minimum inter-mesh vertex distance {min_distance})")]
    NoSharedBoundary { min_distance: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("optimization diverged at shape {shape}, domain {domain}, particle {particle}: {message}")]
    Divergence {
        shape: usize,
        domain: usize,
        particle: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{} subject(s) failed: {}", .0.len(), .0.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; "))]
    Subjects(Vec<(String, String)>),
}

impl Error {
    /// Problems with the caller's input (config, files, arguments) as opposed
    /// to failures inside the pipeline.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Format(_) | Error::InvalidArgument(_) | Error::Config(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
