use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that cannot be combined by the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The CTC target needs more frames than the input provides.
    #[error("infeasible alignment: target needs at least {required} frames, got {available}")]
    Infeasible { required: usize, available: usize },

    #[error("instance too large: {0}")]
    Size(String),

    #[error("IDX parse error: {0}")]
    Idx(#[from] IdxError),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("label {0} out of range")]
    LabelRange(u8),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("shape mismatch for {path}: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        path: String,
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("truncated blob: need {expected} bytes, found {found}")]
    TruncatedBlob { expected: usize, found: usize },
    #[error("parameter {0} missing from checkpoint")]
    MissingEntry(String),
    #[error("checkpoint entry {0} is not a model parameter")]
    UnknownEntry(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
