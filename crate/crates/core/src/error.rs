use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at line {line}, column {column}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },

    /// Scene or camera content that decoded fine but violates an invariant.
    /// `what` names the offending record, e.g. "main splat 17, rotation".
    #[error("{path}: invalid {what}: {msg}")]
    Validation {
        path: PathBuf,
        what: String,
        msg: String,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("dimension mismatch: {msg}")]
    Dimension { msg: String },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step} (frame {frame}): non-finite {term}")]
    NonFinite {
        step: usize,
        frame: usize,
        term: &'static str,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Image {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn validation(
        path: impl Into<PathBuf>,
        what: impl Into<String>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Validation {
            path: path.into(),
            what: what.into(),
            msg: msg.into(),
        }
    }
}
