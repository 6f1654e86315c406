use thiserror::Error;

/// Errors surfaced by model construction, forward routing, losses and I/O.
#[derive(Error, Debug)]
pub enum FcfdError {
    #[error("shape mismatch at {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid stage range: start {start} must be < stop {stop} (N = {n})")]
    StageRange { start: usize, stop: usize, n: usize },

    #[error("unknown model pair '{name}'; valid names: {valid:?}")]
    UnknownRegistryName { name: String, valid: Vec<&'static str> },

    #[error("unsupported bridge geometry at position {position}: {from:?} -> {to:?}")]
    UnsupportedGeometry {
        position: usize,
        from: (usize, usize, usize),
        to: (usize, usize, usize),
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing normalization statistics for path key '{key}'")]
    MissingStats { key: String },

    #[error("non-finite value in {term}{}", path.as_ref().map(|p| format!(" (path {p})")).unwrap_or_default())]
    NonFinite { term: String, path: Option<String> },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FcfdError>;
