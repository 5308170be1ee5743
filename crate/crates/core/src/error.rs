use thiserror::Error;

/// Errors raised by model evaluation, fitting and the asymptotic formulae.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("model `{model}` is not defined at x = {x}: {reason}")]
    Domain {
        model: String,
        x: f64,
        reason: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is numerically singular (reciprocal condition {rcond:.3e})")]
    Singular { rcond: f64 },

    #[error("mean response is zero at observation {index} (x = {x})")]
    ZeroMean { index: usize, x: f64 },

    #[error(
        "response y = {y} at observation {index} is not positive; data weights 1/y^2 are undefined"
    )]
    NonPositiveResponse { index: usize, y: f64 },

    #[error("need more observations than parameters (n = {n}, p = {p})")]
    TooFewObservations { n: usize, p: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("no sign change of the curve difference on [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("curves meet tangentially at x = {x} (dg/dx = {slope:.3e})")]
    Tangency { x: f64, slope: f64 },

    #[error("unsupported fit mode: {0}")]
    Mode(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
