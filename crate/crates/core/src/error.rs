use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "sparse sampling needs {combinations} combinations, above the cap of {cap}; \
         choose alpha so fewer patches per layer are sampled"
    )]
    InfeasibleEnumeration { combinations: u128, cap: u128 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step} (last good checkpoint: {last_good:?})")]
    Divergence {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    ImageFile {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
