use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotARotation(f64),
    #[error("degenerate 6D rotation: {0}")]
    Degenerate6d(&'static str),
    #[error("degenerate 6D block at joint {joint}: {reason}")]
    DegenerateJoint { joint: usize, reason: &'static str },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("model invariant violated: {0}")]
    Invariant(String),
    #[error("point {index} has non-positive depth {depth:.3e} under perspective projection")]
    NonPositiveDepth { index: usize, depth: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(&'static str),
    #[error("camera placement for view {0} failed after 100 attempts")]
    Placement(usize),
    #[error("non-finite {term} at step {step}")]
    NumericAbort { step: usize, term: &'static str },
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("config: {0}")]
    Config(String),
    #[error("scene has no ground-truth block")]
    MissingGroundTruth,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
