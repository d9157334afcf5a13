use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HwmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HwmError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by kernel `{kernel}`")]
    NonFinite { kernel: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error(
        "gradient check failed for `{path}`[{index}]: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel err {rel_err:.3e} > {tol:.1e})"
    )]
    GradCheck { path: String, index: usize, analytic: f64, numeric: f64, rel_err: f64, tol: f64 },

    #[error("decoding aborted: {0}")]
    Decode(String),

    #[error("sampling aborted at Euler step {step}: non-finite state")]
    Integration { step: usize },

    #[error("training aborted at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("format error in {context}: {detail}")]
    Format { context: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HwmError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        HwmError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HwmError::Io { path: path.into(), source }
    }
}
