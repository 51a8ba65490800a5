//! Bregman proximal gradient solvers for composite problems that are smooth
//! relative to a strongly convex kernel, with inertial acceleration, runtime
//! verification of the convergence theory (Lyapunov decrease, step rates,
//! active-set identification, spectral rate prediction, saddle escape), and a
//! reproducible experiment harness for regularized phase retrieval.



pub mod kernel;
pub mod linops;
pub mod model;



pub mod analysis;
pub mod harness;
pub mod reg;
pub mod solver;
pub use kernel::{bregman_divergence, solve_scale_cubic, Kernel};
pub use reg::{Regularizer, SupportPattern};
pub use solver::{InertialSchedule, IterationTrace, Problem, RunConfig};

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("smoothness-constant estimation failed: {0}")]
    Estimation(String),
    #[error("diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
