use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("shape mismatch at layer `{layer}`: expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        actual: String,
    },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::OutOfRange { .. } => "out_of_range",
            Error::TraceMismatch(_) => "trace_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
