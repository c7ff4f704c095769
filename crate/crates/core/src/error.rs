use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("bad magic bytes in tensor file")]
    BadMagic,
    #[error("unsupported dtype code {0}")]
    DtypeUnsupported(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("kernel {kernel} larger than padded input {input}")]
    KernelTooLarge { kernel: usize, input: usize },
    #[error("pool output size {out} exceeds input {input}")]
    BadOutputSize { out: usize, input: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bad hyperparameter: {0}")]
    BadHyperparam(String),
    #[error("channel count {channels} not divisible by keypoint count {k}")]
    DivisibilityViolation { channels: usize, k: usize },
    #[error("coordinate {0} outside [-1, 1]")]
    CoordOutOfRange(f64),
    #[error("cache does not belong to the current parameters")]
    StaleCache,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("could not place objects after {0} attempts")]
    PlacementFailure(usize),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("split {0} is empty")]
    EmptySplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
