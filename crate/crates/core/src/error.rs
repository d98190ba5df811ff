use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported layer kind {kind} in {context}")]
    UnsupportedKind { kind: String, context: String },
    #[error("tensor is empty")]
    EmptyTensor,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to parse {what}: {reason}")]
    Parse { what: String, reason: String },
    #[error("blob {file} holds {actual} bytes but shape {shape:?} needs {expected}")]
    BlobSizeMismatch {
        file: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dangling reference: {0}")]
    DanglingRef(String),
    #[error("layer {0} references a layer defined after it")]
    CyclicGraph(String),
    #[error("bad IDX magic: {0}")]
    BadMagic(String),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("requested {requested} samples from a dataset of {available}")]
    KTooLarge { requested: usize, available: usize },

    #[error("batch norm layer {0} does not directly follow a conv or fully connected layer")]
    OrphanBatchNorm(String),
    #[error("graph still contains batch norm layer {0}; fold it first")]
    UnfoldedBatchNorm(String),
    #[error("no depthwise -> [activation] -> conv pattern found")]
    NoPatternFound,
    #[error("non-positive rescale factor {value} for channel {channel} of {layer}")]
    NonPositiveScale { layer: String, channel: usize, value: f64 },

    #[error("calibration data is empty")]
    EmptyCalibration,
    #[error("non-finite value in {0}")]
    NonFiniteInput(String),
    #[error("non-finite gradient for trainable {0}")]
    NonFiniteGradient(String),
    #[error("no quantization parameters for site {0}")]
    MissingSiteParams(String),
    #[error("int32 accumulator overflow in layer {0}")]
    AccumulatorOverflow(String),
    #[error("unsupported artifact version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
