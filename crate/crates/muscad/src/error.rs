//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty corpus after filtering")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("corpus too small: need at least {needed} sentences, found {found}")]
    CorpusTooSmall { needed: usize, found: usize },

    #[error("non-finite {what} in parameter block {block}")]
    NonFinite { what: String, block: String },

    #[error("document count is zero for term {term}")]
    ZeroDocCount { term: String },

    #[error("zero-norm embedding for term {term}")]
    ZeroNorm { term: String },

    #[error("review ids differ: only in predicted {only_predicted:?}, only in gold {only_gold:?}")]
    ReviewIdMismatch {
        only_predicted: Vec<String>,
        only_gold: Vec<String>,
    },

    #[error("malformed {what} in {path}: {detail}")]
    Format {
        what: String,
        path: PathBuf,
        detail: String,
    },

    #[error("missing artifact {artifact}: run `{run_first}` first")]
    MissingArtifact { artifact: String, run_first: String },

    #[error("refusing to overwrite {path} (pass --force to replace it)")]
    Overwrite { path: PathBuf },

    #[error("config hash mismatch against upstream artifact {artifact} (rerun upstream stages or drop --strict)")]
    ConfigMismatch { artifact: String },

    #[error("category naming failed: {0}")]
    Naming(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code class used by the command-line frontend: usage/config
    /// problems map to 1, runtime failures to 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Overwrite { .. }
                | Error::MissingArtifact { .. }
                | Error::ConfigMismatch { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
