//! Constant-stepsize stochastic approximation with Markovian noise: the
//! finite-time bound pipeline and the oracles used to validate it.

pub mod error;
pub mod lyapunov;
pub mod mdp;
pub mod qlearn;
pub mod report;
pub mod sa_core;
pub mod td;

pub use error::{Error, Result};
