use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("duplicate {family} hook at {point}")]
    DuplicateHook { family: String, point: String },

    #[error("invalid quantizer: {0}")]
    Quantizer(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no feasible bit-width configuration: {0}")]
    NoFeasibleConfig(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("cannot prune `{0}`: downstream consumers do not accept the pruned channels")]
    NotPrunable(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
