use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration (bad hyperparameter, inexpressible architecture).
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value where the contract requires finite arithmetic.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// A gradient check landed too close to a non-differentiable point.
    #[error("non-differentiable point: nearest kink at distance {distance:.3e}")]
    NonDifferentiable { distance: f64 },

    /// An API called out of sequence (backward twice, non-scalar loss, ...).
    #[error("invalid use: {0}")]
    Usage(String),

    /// Malformed or inconsistent input data (files, labels, manifests).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { context: context.into(), detail: detail.into() }
    }
}
