use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate frame {frame_index} in track {track_id}")]
    DuplicateFrame { track_id: String, frame_index: u64 },

    #[error("model file checksum mismatch")]
    ChecksumMismatch,

    #[error("unsupported version: {0}")]
    VersionUnsupported(String),

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
