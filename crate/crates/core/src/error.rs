use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}: line {line}: {msg}")]
    Parse { file: String, line: u64, msg: String },

    #[error("check-in at line {line} references unknown POI {poi}")]
    UnknownPoi { line: u64, poi: u64 },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("user {user} has {len} check-in(s); leave-one-out needs at least 2")]
    Split { user: u64, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in `{param}`")]
    Numeric { param: String },

    #[error("device {user} expected a snapshot from neighbor {neighbor}, none was published")]
    MissingSnapshot { user: u64, neighbor: u64 },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("artifact {path} was produced by config {found}, current config is {expected} (use --force to override)")]
    ChainMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
