use thiserror::Error;

pub type Result<T> = std::result::Result<T, QuantError>;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f64 },

    /// A scale or step that must be strictly positive and finite was not.
    #[error("value {0} is outside the domain of log2 (must be positive and finite)")]
    Domain(f64),

    #[error("power-of-two exponent {0} is outside [{min}, {max}]", min = crate::quant::MIN_EXPONENT, max = crate::quant::MAX_EXPONENT)]
    ExponentOutOfRange(f64),

    /// Every code quantized to zero, so the least-squares denominator vanished.
    #[error("all quantization codes are zero at step {delta}; least-squares fit is undefined")]
    DegenerateCodes { delta: f64 },

    #[error("least-squares fit produced a non-positive step {0}")]
    NonPositiveScale(f64),

    #[error("invalid fitting weights: {0}")]
    InvalidWeights(String),

    #[error("ratio undefined: {0}")]
    UndefinedRatio(String),

    #[error("accumulator overflow: {0}")]
    Overflow(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("tensor file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QuantError {
    /// Errors caused by the caller's inputs, as opposed to failures that
    /// happen while running (I/O, divergence).
    pub fn is_validation(&self) -> bool {
        !matches!(self, QuantError::Io(_) | QuantError::Diverged { .. })
    }
}
