use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("invalid dataset: {0}")]
    Validation(String),

    #[error("knowledge graph already carries inverse relations")]
    AlreadyAugmented,

    #[error("relation {0} missing from lexicon")]
    LexiconMiss(u32),

    #[error("invalid lexicon entry for relation {id}: {msg}")]
    Lexicon { id: u32, msg: String },

    #[error("backend failure on query {qid}: {msg}")]
    Backend { qid: usize, msg: String },

    #[error("corrupted cache record for query {qid}: {msg}")]
    CorruptRecord { qid: usize, msg: String },

    #[error("artifact configuration mismatch: expected hash {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("cache has no entry for query {0}")]
    CacheMiss(usize),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
