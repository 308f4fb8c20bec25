use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("too many persons for configured M_max: {persons} > {max_persons}")]
    TooManyPersons { persons: usize, max_persons: usize },

    #[error("dimension mismatch for {what}: file has {found}, config expects {expected}")]
    DimensionMismatch {
        what: &'static str,
        found: usize,
        expected: usize,
    },

    #[error("malformed record {index}: {msg}")]
    MalformedRecord { index: usize, msg: String },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("missing truth label for active {head} head in instance {instance}")]
    MissingTruth { head: &'static str, instance: usize },

    #[error("non-finite gradient at {path}: {value}")]
    NonFinite { path: String, value: f64 },

    #[error("invalid synthetic spec: {0}")]
    Synth(String),

    #[error("classifier error: {0}")]
    Classifier(String),

    #[error("state space too large for exhaustive MAP: {states} joint states exceeds {limit}")]
    StateSpace { states: f64, limit: u64 },

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("config fingerprint mismatch: {0:016x} vs {1:016x}")]
    Fingerprint(u64, u64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
