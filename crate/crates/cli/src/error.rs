use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] sa_lab_core::Error),

    #[error("assumption check failed: {0}")]
    Assumption(String),

    #[error("cannot write {path}: {msg}")]
    Output { path: String, msg: String },
}

impl CliError {
    /// 1 for input problems, 2 for failed assumptions, 3 for divergence or
    /// non-convergence.
    pub fn exit_code(&self) -> i32 {
        use sa_lab_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Output { .. } => 1,
            CliError::Assumption(_) => 2,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::NonFiniteIterate { .. } | E::NoConvergence { .. } => 3,
                E::NotHurwitz { .. }
                | E::PeriodicChain { .. }
                | E::NotIrreducible { .. }
                | E::EnvelopeFailure(_)
                | E::DeltaTooLarge { .. }
                | E::StepsizeTooLarge { .. }
                | E::CapExceeded { .. } => 2,
                _ => 1,
            },
        }
    }
}
