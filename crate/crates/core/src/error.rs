use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid example {image_id}: {message}")]
    Validation { image_id: String, message: String },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("nothing to mask")]
    NothingToMask,

    #[error("too few regions: need at least 3, got {0}")]
    TooFewRegions(usize),

    #[error("no negative available")]
    NoNegativeAvailable,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{task}: zero masked positions")]
    NoMaskedPositions { task: &'static str },

    #[error("shuffle map references position {position} outside {len} regions")]
    ShuffleOutOfRange { position: usize, len: usize },

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),

    #[error("empty stage corpus")]
    EmptyStageCorpus,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing corpus for granularity {0}")]
    MissingCorpus(String),

    #[error("model has no {0} head")]
    MissingHead(String),

    #[error("k = {k} exceeds gallery size {gallery}")]
    CutoffTooLarge { k: usize, gallery: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
