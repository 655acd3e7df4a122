use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("kernel {kernel:?} does not fit padded input {padded:?}")]
    KernelTooLarge { kernel: [usize; 2], padded: [usize; 2] },

    #[error("spatial size {extent} is not divisible by pool size {pool}")]
    PoolDivisibility { extent: usize, pool: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },

    #[error("layer {layer} references layer {reference}, which does not precede it")]
    TopologicalOrder { layer: usize, reference: usize },

    #[error("model invariant violated: {0}")]
    Invariant(String),

    #[error("dataset invariant violated: {0}")]
    Dataset(String),

    #[error("class {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },

    #[error("need {needed} examples of class {class}, found {found}")]
    InsufficientExamples { class: usize, needed: usize, found: usize },

    #[error("concern map does not fit the model: {0}")]
    MapMismatch(String),

    #[error("module references model {expected}, got {found}")]
    ModelHashMismatch { expected: String, found: String },

    #[error("input shape mismatch: {0}")]
    InputShapeMismatch(String),

    #[error("unknown label {0}")]
    UnknownLabel(String),

    #[error("duplicate label {0}")]
    DuplicateLabel(String),

    #[error("module set is empty")]
    EmptySet,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
