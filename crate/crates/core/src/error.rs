use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("step {step} out of range [{min}, {max}]")]
    StepOutOfRange { step: usize, min: usize, max: usize },

    #[error("invalid step pair: {0}")]
    InvalidStepPair(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown label {0}")]
    UnknownLabel(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("non-finite value in {stage} at index {index}")]
    NonFinite { stage: &'static str, index: usize },

    #[error("rank {rank} out of range [1, {max}]")]
    InvalidRank { rank: usize, max: usize },

    #[error("invalid SVD factors: {0}")]
    InvalidFactors(String),

    #[error("bad magic bytes in {0}")]
    BadMagic(&'static str),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("file truncated at byte {offset}")]
    Truncated { offset: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("constraints not satisfied after {attempts} attempts")]
    Infeasible { attempts: usize },

    #[error("weak and strong estimators coincide; optimal scale undefined")]
    DegenerateDirection,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
