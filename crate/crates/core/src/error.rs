use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed detection: {field}: {reason}")]
    MalformedDetection { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid class profile: {0}")]
    InvalidProfile(String),

    #[error("stream mismatch: {0}")]
    StreamMismatch(String),

    /// Syntax or schema failure while reading a file. `line` is 1-based when known.
    #[error("parse error{}: {msg}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, msg: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("tensor format: {0}")]
    TensorFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn malformed(field: &'static str, reason: impl Into<String>) -> Self {
        Error::MalformedDetection {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedDetection { .. } => "malformed_detection",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::LayoutMismatch(_) => "layout_mismatch",
            Error::InvalidProfile(_) => "invalid_profile",
            Error::StreamMismatch(_) => "stream_mismatch",
            Error::Parse { .. } => "parse_error",
            Error::Range(_) => "range_error",
            Error::TensorFormat(_) => "tensor_format",
            Error::Io(_) => "io_error",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
