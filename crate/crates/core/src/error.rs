use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite Gaussian parameter")]
    NonFiniteParameter,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("unsupported SH coefficient count {0} (expected (deg+1)^2 for deg 0..=3)")]
    UnsupportedShCount(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty Gaussian cloud")]
    EmptyCloud,
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("negative loss weight {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("insufficient valid pixels: have {available}, need {needed}")]
    InsufficientPoints { available: usize, needed: usize },
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint version mismatch: file has {found}, this build expects {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("config hash mismatch: checkpoint {checkpoint:016x} vs provided {provided:016x}")]
    ConfigHashMismatch { checkpoint: u64, provided: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::File { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
