//! Solver for mean-field (McKean-Vlasov) stochastic control under
//! constraints in law.
//!
//! The constrained problem is rewritten as an unconstrained auxiliary problem
//! in one extra scalar variable `z`: simulate an interacting particle system
//! under neural feedback policies, penalize constraint violations and the
//! shortfall against the target `z` through exact positive-part penalties,
//! and train the policies to drive the auxiliary loss to zero over a grid of
//! candidate values. The constrained optimal value is then read off the zero
//! level-set of the trained loss curve, and the optimal feedback control is
//! recovered from the same networks.
//!
//! Crate layout:
//! - [`nn`]: dense policy networks, reverse-mode gradients, Adam;
//! - [`measures`]: statistics of empirical measures;
//! - [`constraints`]: the catalog of law constraints and penalty aggregation;
//! - [`dynamics`]: particle systems, noise plans, Euler stepping, simulation;
//! - [`levelset`]: the trainer, curve evaluation, value extraction, control
//!   recovery;
//! - [`benchmarks`]: portfolio-selection and energy-storage instances with
//!   their reference solutions (closed form and grid dynamic programming);
//! - [`config`] / [`outputs`]: run configuration and result files for the CLI.

pub mod benchmarks;
pub mod config;
pub mod constraints;
pub mod dynamics;
pub mod fastmath;
pub mod levelset;
pub mod measures;
pub mod nn;
pub mod outputs;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite state at step {step}, particle {particle}")]
    NonFiniteState { step: usize, particle: usize },
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
    #[error("no grid point attains the threshold; value undefined")]
    InfeasibleGrid,
    #[error("value is undefined; cannot recover a control")]
    UndefinedValue,
    #[error("no strictly decreasing segment in the curve")]
    NoDecreasingSegment,
    #[error("unknown benchmark id: {0}")]
    UnknownBenchmark(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
