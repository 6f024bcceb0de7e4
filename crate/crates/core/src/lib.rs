//! Finite-sum stochastic optimization with the Unified SAM update.
//!
//! The crate is organised bottom-up:
//!
//! - [`objective`]: the finite-sum abstraction, gradient oracles and sampling vectors.
//! - [`problems`]: synthetic ridge and logistic regression instances with exact metadata.
//! - [`sampling`]: sampling schemes, importance probabilities and expected-residual constants.
//! - [`schedules`]: step sizes prescribed by the convergence theory.
//! - [`optimizer`]: the Unified SAM / Unified VaSSO iterations and trajectory recording.
//! - [`checks`]: numerically checkable inequalities (perturbed-gradient moment bounds, envelopes).
//! - [`experiment`]: configuration, presets, multi-trial orchestration and CSV output.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod error;
pub mod experiment;
pub mod objective;
pub mod optimizer;
pub mod problems;
pub mod rng;
pub mod sampling;
pub mod schedules;

mod linalg;

pub use error::{Error, Result};
pub use objective::{FiniteSum, ProblemStats, SamplingVector};
pub use optimizer::{OptimizerConfig, RunRecord};
pub use problems::{LogisticSpec, Problem, RidgeSpec, Spectrum};
pub use sampling::{ErConstants, SamplingScheme};
pub use schedules::{LambdaSchedule, PlRates, StepPlan};

