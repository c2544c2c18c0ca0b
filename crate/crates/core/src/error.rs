use std::path::PathBuf;

use crate::types::ClassId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}")]
    Parse {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    // Embedding files.
    #[error("bad magic: expected \"REMB\", found {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid embedding header: {0}")]
    InvalidHeader(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("index has {keys} keys for {rows} rows")]
    IndexLengthMismatch { rows: usize, keys: usize },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("duplicate index key {0:?}")]
    DuplicateKey(String),
    #[error("invalid index key {0:?}")]
    InvalidKey(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NonNormalizedInput { row: usize, norm: f64 },
    #[error("text embedding matrix has no rows")]
    NoClasses,

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    // Score matrices and re-scoring.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid score {value} in {context}")]
    InvalidScore { context: String, value: f64 },
    #[error("text embedding key {0:?} is not a known class name")]
    UnknownClassKey(String),
    #[error("class {0:?} has no text embedding")]
    MissingClassText(String),
    #[error("unknown class id {0}")]
    UnknownClassId(ClassId),
    #[error("detection embeddings have dim {detections}, text embeddings have dim {text}")]
    EmbeddingDimMismatch { detections: usize, text: usize },
    #[error("detection {det_id}: score vector has {found} entries, expected {expected}")]
    ScoreVectorLength {
        det_id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate detection id {0:?}")]
    DuplicateDetection(String),
    #[error("invalid detection {det_id}: {reason}")]
    InvalidDetection { det_id: String, reason: String },

    // Loss.
    #[error("component {index} is out of range: {value}")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    // Annotations.
    #[error("annotation {ann_id} references missing {kind} {id}")]
    DanglingReference {
        ann_id: u64,
        kind: &'static str,
        id: String,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("annotation {0} has a degenerate box")]
    InvalidBox(u64),
    #[error("class {class_id} has {available} instances, {k} requested")]
    InsufficientInstances {
        class_id: ClassId,
        available: usize,
        k: usize,
    },
    #[error("subset is not contained in the full set: {0}")]
    SubsetNotContained(String),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("no class has ground truth")]
    NoGroundTruth,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
