use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// NaN or infinity produced by an operation.
    #[error("numeric error: non-finite value produced by {op}")]
    NonFinite { op: String },

    /// API misuse: wrong call order, bad index, etc.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss or parameter.
    #[error("training diverged in epoch {}: {}", .0.epoch, .0.cause)]
    Diverged(Box<Divergence>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where training failed, with the best model seen before the failure.
#[derive(Debug)]
pub struct Divergence {
    pub epoch: usize,
    pub cause: String,
    pub last_good: crate::model::FlowModel,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
