use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("joint {joint} lies at or behind the camera plane (depth {depth} mm)")]
    BehindCamera { joint: usize, depth: f64 },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("batch-statistics normalization needs at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("activation cache does not match the model: {0}")]
    StaleCache(String),

    #[error("L0 must be non-negative, got {0}")]
    NegativeL0(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("input channels do not match refiner mode: {0}")]
    ModeMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
