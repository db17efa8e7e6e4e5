use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown concept id {0}")]
    UnknownConcept(usize),

    #[error("training diverged at step {step}: loss {loss}, initial loss {initial}")]
    TrainingDiverged { step: usize, loss: f32, initial: f32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("unsupported checkpoint version {found} (max supported {supported})")]
    Version { found: u32, supported: u32 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
