use thiserror::Error;

/// Errors raised by the analysis and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("chain has {classes} closed communicating classes; stationary distribution is not unique")]
    NotIrreducible { classes: usize },

    #[error("chain is periodic with period {period}")]
    PeriodicChain { period: usize },

    #[error("no geometric mixing envelope could be certified: {0}")]
    EnvelopeFailure(String),

    #[error("mixing rate must lie in (0, 1), got {0}")]
    InvalidRate(f64),

    #[error("iterate became non-finite at iteration {iteration}")]
    NonFiniteIterate { iteration: usize },

    #[error("iterate norm {norm:e} exceeded the divergence guard at iteration {iteration}")]
    Diverged { iteration: usize, norm: f64 },

    #[error("noise process has no finite alphabet")]
    InfiniteAlphabet,

    #[error("matrix is not Hurwitz (largest eigenvalue real part {max_real:e})")]
    NotHurwitz { max_real: f64 },

    #[error("linear system is numerically singular: {0}")]
    SolveSingular(String),

    #[error("scan exceeded cap {cap} while searching for {what}")]
    CapExceeded { what: &'static str, cap: u64 },

    #[error("could not bracket the root of {0}")]
    BracketFailure(&'static str),

    #[error("delta {delta} must be below c3/c4 = {limit}")]
    DeltaTooLarge { delta: f64, limit: f64 },

    #[error("stepsize {epsilon:e} is outside the admissible range (eps_delta = {eps_delta:e}): {reason}")]
    StepsizeTooLarge { epsilon: f64, eps_delta: f64, reason: String },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e}, sampling constant c_est = {c_est})")]
    NoConvergence { iterations: usize, residual: f64, c_est: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
