use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("frozen-state violation: {0}")]
    FrozenViolation(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("empty subset: voxel {voxel} holds no primitives")]
    EmptySubset { voxel: usize },

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::Index(_) => "index",
            Error::Domain(_) => "domain",
            Error::Usage(_) => "usage",
            Error::Training { .. } => "training",
            Error::FrozenViolation(_) => "frozen_violation",
            Error::Registry(_) => "registry",
            Error::EmptySubset { .. } => "empty_subset",
            Error::DegenerateMetric(_) => "degenerate_metric",
            Error::Io { .. } => "io",
        }
    }
}
