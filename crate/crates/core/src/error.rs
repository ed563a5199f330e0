use thiserror::Error;

/// Errors raised across the library. The CLI maps each variant onto a
/// distinct exit code.
#[derive(Debug, Error)]
pub enum HveError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {what} = {index} (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("segment too short: need {needed} steps, have {available}")]
    SegmentTooShort { needed: usize, available: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("provenance mismatch: dataset was generated from environment {expected}, got {found}")]
    Provenance { expected: String, found: String },

    #[error("missing input artifact: {0}")]
    MissingArtifact(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, HveError>;

impl HveError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HveError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(what: impl Into<String>, source: serde_json::Error) -> Self {
        HveError::Json {
            what: what.into(),
            source,
        }
    }
}

pub(crate) fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index < limit {
        Ok(())
    } else {
        Err(HveError::Index { what, index, limit })
    }
}
