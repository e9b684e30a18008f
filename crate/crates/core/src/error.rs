use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate vector: {what} has norm {norm:e} (below 1e-12)")]
    DegenerateVector { what: String, norm: f64 },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("window error: expected {expected} frames, got {got}")]
    Window { expected: usize, got: usize },

    #[error("item {0} has every factor masked")]
    EmptyItem(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("mining error: {0}")]
    Mining(String),

    #[error("catalog exhausted: {0}")]
    CatalogExhausted(String),

    #[error("gradient check is not deterministic: two identical forward calls gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("gradient check failed: max relative error {max_rel_err:e} is not below {tolerance:e}")]
    GradcheckFailed { max_rel_err: f64, tolerance: f64 },

    #[error("training diverged at epoch {epoch}, step {step} (loss {loss}); last good checkpoint at {checkpoint:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Shape(_)
            | Error::DegenerateVector { .. }
            | Error::NonDeterministic { .. }
            | Error::GradcheckFailed { .. }
            | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
