use thiserror::Error;

/// Errors produced by the engine and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A model manifest could not be parsed or is missing entries.
    #[error("malformed manifest: {0}")]
    Manifest(String),

    /// Tensor table and payload disagree on the number of bytes.
    #[error("payload size mismatch for {what}: expected {expected} bytes, found {actual}")]
    PayloadSize { what: String, expected: u64, actual: u64 },

    /// A structurally valid value violates a model invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("model is already skewed")]
    AlreadySkewed,

    #[error("scheme requires a skewed model")]
    NotSkewed,

    /// Partial key cache and KV pool disagree on a row position.
    #[error("position mismatch: expected row <= {expected}, got {got}")]
    PositionMismatch { expected: usize, got: usize },

    /// Engine-internal inconsistency, tagged with where it happened.
    #[error("internal error at iteration {iteration}, layer {layer}: {message}")]
    Internal {
        iteration: usize,
        layer: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable name for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::Manifest(_) => "manifest",
            Error::PayloadSize { .. } => "payload_size",
            Error::Validation(_) => "validation",
            Error::AlreadySkewed => "already_skewed",
            Error::NotSkewed => "not_skewed",
            Error::PositionMismatch { .. } => "position_mismatch",
            Error::Internal { .. } => "internal",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
