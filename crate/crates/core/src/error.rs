use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("batch norm needs at least 2 elements per channel in training mode, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("degenerate quantization range [{lower}, {upper}]")]
    DegenerateRange { lower: f64, upper: f64 },

    #[error("model format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),

    #[error("malformed model file: {0}")]
    Malformed(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::InvalidParam(_) => "invalid-param",
            Error::BatchTooSmall(_) => "batch-too-small",
            Error::Graph(_) => "graph",
            Error::DegenerateRange { .. } => "degenerate-range",
            Error::Version { .. } => "version",
            Error::Checksum(_) => "checksum",
            Error::Malformed(_) => "malformed",
            Error::Data(_) => "data",
            Error::Diverged(_) => "diverged",
            Error::StageOrder(_) => "stage-order",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
