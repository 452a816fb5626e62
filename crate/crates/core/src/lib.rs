//! Stochastic approximation with asymptotic-normality checks.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedules`]: polynomial step sizes and their regime classification.
//! - [`spectral`]: Hurwitz analysis, the two Lyapunov equations for the
//!   limiting covariance, optimal gain and averaged covariance.
//! - [`markov`]: finite-state controlled kernels, stationary laws, Poisson
//!   equation solutions and the exact noise covariance `U*`.
//! - [`engine`]: the SA recursion (plain or with randomly truncated,
//!   expanding bounds) and its running average.
//! - [`harness`]: Monte-Carlo ensembles, scaled errors, covariance and
//!   normality statistics, and the comparison against theory.
//! - [`config`] and [`cli`]: JSON experiment files and the command-line front end.

// NaN must fail every guard, hence `!(x > y)`; index loops mirror the matrix algebra
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod engine;
pub mod harness;
pub mod linalg;
pub mod markov;
pub mod schedules;
pub mod spectral;

#[cfg(feature = "cli")]
pub mod cli;

pub use engine::{Problem, SaState, TruncationPolicy};
pub use schedules::StepSchedule;
