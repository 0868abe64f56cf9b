use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Param(String),

    #[error("population must contain at least one specimen")]
    EmptyPopulation,

    #[error("pose grid is empty along {0}")]
    EmptyGrid(&'static str),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("cannot compose views: {0}")]
    Composition(String),

    #[error("scale coefficient {coefficient} > 1 would require upscaling")]
    UpscaleRequired { coefficient: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot normalize vector with norm {0:e}")]
    Normalization(f64),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u8, expected: u8 },

    #[error("malformed {what} at byte {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("triplet sampling: {0}")]
    Sampling(String),

    #[error("accuracy is undefined for an empty batch")]
    EmptyBatch,

    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint: {last_good}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: String,
    },

    #[error("classifier: {0}")]
    Classifier(String),

    #[error("filter leaves fewer than two embeddings")]
    EmptyFilter,

    #[error("no catalog mesh for specimen {0}")]
    Catalog(u32),

    #[error("iso value {iso} produces no surface (data range {min}..{max})")]
    EmptySurface { iso: f64, min: f64, max: f64 },

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            offset,
            reason: reason.into(),
        }
    }
}
