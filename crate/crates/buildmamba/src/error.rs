//! Crate-wide error type. Every fallible op reports enough context to
//! reconstruct what was rejected without a debugger.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value ({msg})")]
    NonFinite { op: &'static str, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("training aborted at step {step}: non-finite {component}")]
    NonFiniteLoss { step: usize, component: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    /// Validation errors are caller mistakes (bad shapes, bad flags, bad
    /// config); everything else is a runtime failure. The CLI maps the former
    /// to exit code 1 and the latter to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. } | Error::Invalid { .. } | Error::Config(..)
        )
    }
}
