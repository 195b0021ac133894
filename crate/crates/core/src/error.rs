use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("discount factor {0} is outside the allowed range")]
    InvalidGamma(f64),
    #[error("{what} must sum to one (sum = {sum})")]
    NotNormalized { what: String, sum: f64 },
    #[error("{0} contains a negative or non-finite entry")]
    InvalidEntry(String),
    #[error("reward {value} at ({state}, {action}) exceeds the unit bound")]
    RewardOutOfBounds { state: usize, action: usize, value: f64 },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("distribution has no support")]
    EmptySupport,
    #[error("construction failed: {0}")]
    ConstructionFailure(String),
    #[error("degenerate design: the empirical Gram matrix is numerically zero")]
    DegenerateDesign,
    #[error("ball radius must be positive (got {0})")]
    InvalidRadius(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("feature norm {norm} at ({state}, {action}) exceeds one")]
    FeatureNorm { state: usize, action: usize, norm: f64 },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("dataset is invalid: {0}")]
    InvalidDataset(String),
    #[error("reports mix configurations {0} and {1}")]
    MixedConfig(String, String),
    #[error("nothing to aggregate")]
    Empty,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
