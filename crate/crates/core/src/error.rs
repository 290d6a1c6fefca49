use thiserror::Error;

/// Crate-wide error type. Every failure mode named by a module contract has
/// its own variant so callers (and tests) can match on the exact condition.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("zero-norm feature vector at row {row}")]
    DegenerateFeature { row: usize },

    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),

    #[error("vocabulary file is empty")]
    EmptyVocabulary,

    #[error("rendered query needs {needed} tokens but context length is {context}")]
    ContextOverflow { needed: usize, context: usize },

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("unknown template {0:?}")]
    UnknownTemplate(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported {kind} format version {found} (expected {expected})")]
    BadVersion {
        kind: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("truncated {kind} file while reading {what}")]
    Truncated { kind: &'static str, what: String },

    #[error("checkpoint record {name:?} has shape {shape:?}, inconsistent with metadata ({detail})")]
    RecordShapeMismatch {
        name: String,
        shape: Vec<usize>,
        detail: String,
    },

    #[error("checkpoint is missing record {0:?}")]
    MissingRecord(String),

    #[error("manifest references sample id {0} absent from the feature file")]
    DanglingSample(u32),

    #[error("feature dimension {features} does not match model dimension {model}")]
    FeatureDimMismatch { features: usize, model: usize },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("dataset has no samples")]
    EmptyDataset,

    #[error("warmup ({warmup}) must be shorter than the total schedule ({total})")]
    WarmupTooLong { warmup: usize, total: usize },

    #[error("non-finite gradient in {what}; aborting (step {step})")]
    NonFiniteGradient { what: String, step: usize },

    #[error("correlation undefined: {0} has zero variance")]
    UndefinedCorrelation(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("bad JSON in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
