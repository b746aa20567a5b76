use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Moment estimates violate a structural invariant (non-positive
    /// variance, Cauchy-Schwarz, non-finite value).
    #[error("invalid moment estimates: {0}")]
    InvalidMoments(String),

    /// A denominator that must be strictly positive vanished.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A treatment probability left the open unit interval, or an arm is empty.
    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),
}
