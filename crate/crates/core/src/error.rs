use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported size: {0}")]
    Size(String),

    #[error("matrix not symmetric: |m[{row},{col}] - m[{col},{row}]| = {deviation:e} exceeds {tol:e}")]
    NotSymmetric {
        row: usize,
        col: usize,
        deviation: f64,
        tol: f64,
    },

    #[error("matrix not positive semi-definite: eigenvalue {eigenvalue:e}")]
    NotPsd { eigenvalue: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("patch extraction failed: {0}")]
    Extraction(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("format error{} at byte {offset}: {msg}", path.as_ref().map(|p| format!(" in {}", p.display())).unwrap_or_default())]
    Format {
        path: Option<PathBuf>,
        offset: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn with_path(self, p: &std::path::Path) -> Self {
        match self {
            Error::Format { offset, msg, .. } => Error::Format {
                path: Some(p.to_path_buf()),
                offset,
                msg,
            },
            other => other,
        }
    }

    /// Stable short identifier, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::Size(_) => "size",
            Error::NotSymmetric { .. } => "not-symmetric",
            Error::NotPsd { .. } => "not-psd",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Divergence { .. } => "divergence",
            Error::Extraction(_) => "extraction",
            Error::DegenerateData(_) => "degenerate-data",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
