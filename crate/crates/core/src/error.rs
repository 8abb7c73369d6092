use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("space dimension {dimension} exceeds the configured cap {cap}")]
    Sizing { dimension: usize, cap: usize },

    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("mode index {index} out of range (space has {modes} modes)")]
    InvalidMode { index: usize, modes: usize },

    #[error("level index {index} out of range 1..={levels}")]
    InvalidLevel { index: usize, levels: usize },

    #[error("basis index {index} out of range (dimension {dimension})")]
    InvalidIndex { index: usize, dimension: usize },

    #[error("operators live on different spaces")]
    SpaceMismatch,

    #[error("matrix is not Hermitian (residual {residual:.3e})")]
    NotHermitian { residual: f64 },

    #[error("matrix is not unitary (residual {residual:.3e})")]
    NotUnitary { residual: f64 },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("ladder relation [X3, X+] = X+ violated (residual {residual:.3e})")]
    LadderViolation { residual: f64 },

    #[error("operators are not simultaneously diagonal (off-diagonal norm {residual:.3e})")]
    NotDiagonal { residual: f64 },

    #[error("invalid model parameters: {0}")]
    InvalidModel(String),

    #[error("resonance condition violated: {0}")]
    Resonance(String),

    #[error("rotation parameter {epsilon} outside |epsilon| < 1")]
    EpsilonOutOfRange { epsilon: f64 },

    #[error("guard violation: {0}")]
    Guard(String),

    #[error("scenario {scenario} is not defined for model kind {model}")]
    UnsupportedScenario { scenario: String, model: String },

    #[error("blocks of the conserved operators are violated (leakage {residual:.3e})")]
    BlockViolation { residual: f64 },

    #[error("series is not oscillatory: {0}")]
    NotOscillatory(String),

    #[error("scaling study needs at least 3 positive grid points")]
    ScalingGrid,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
