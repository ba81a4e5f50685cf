use std::path::PathBuf;

/// Errors produced by dataset parsing, training, and checkpoint IO.
///
/// Contract violations (shape or length mismatches between values that the
/// caller constructs) are treated as programmer error and panic via
/// `assert!` instead of surfacing here.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("idx format error: {0}")]
    IdxFormat(String),

    #[error("idx stream truncated: {0}")]
    IdxTruncated(String),

    #[error("label out of range: {0}")]
    LabelDomain(String),

    #[error("dataset invariant violated: {0}")]
    DatasetInvariant(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("degenerate population: total mass is zero")]
    DegeneratePopulation,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("missing data file: {0}")]
    MissingData(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
