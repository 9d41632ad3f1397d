use std::path::PathBuf;

use grla_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("domain label must be 0 or 1, got {value} (row {row})")]
    InvalidDomainLabel { row: usize, value: u8 },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("sublabel directory {0:?} has no binarization mapping")]
    UnmappedSublabel(String),
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss}); last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        last_good: Option<PathBuf>,
    },
    #[error("degenerate reference statistics: {0}")]
    DegenerateReference(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
