use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("risk level must lie in [0, 1), got {0}")]
    InvalidRiskLevel(f64),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for ensemble of {len}")]
    MemberIndex { index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate action limits: v_minus={v_minus} v_plus={v_plus}")]
    DegenerateLimits { v_minus: f64, v_plus: f64 },
    #[error("horizon {given} too small for precision {precision}; need at least {required}")]
    HorizonTooSmall {
        given: usize,
        required: usize,
        precision: f64,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
