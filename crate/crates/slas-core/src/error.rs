use thiserror::Error;

/// Errors surfaced by estimator, oracle, and trainer operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("reward group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite reward at index {0}")]
    NonFiniteReward(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("division hazard: pooled std is zero and epsilon is zero")]
    DivisionHazard,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("singular denominator: sigma + epsilon is zero for bin {0}")]
    SingularDenominator(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate metric: all weights are zero")]
    DegenerateMetric,
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate density: sigma is zero at step {0}")]
    DegenerateDensity(usize),
    #[error("singular time: t = {0} is not positive")]
    SingularTime(f64),
    #[error("regime invalid: {0}")]
    RegimeInvalid(String),
    #[error("non-finite gradient at iteration {iteration}: {detail}")]
    NonFiniteGradient { iteration: usize, detail: String },
    #[error("importance ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("configs differ beyond shaping: {0}")]
    ConfigMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
