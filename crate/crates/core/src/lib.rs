//! Kernel methods for learning and solving PDEs from data.
//!
//! The pipeline has three steps: smooth noisy solution samples and estimate
//! their derivatives ([`smoother`]), learn the algebraic form of the equation
//! from those features ([`equation`], with a sparse-regression baseline in
//! [`sindy`]), and solve the learned equation for new source terms with a
//! kernel collocation solver ([`solver`]).

// Argument checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod equation;
pub mod error;
pub mod experiment;
pub mod gram;
pub mod kernel;
pub mod pipeline;
pub mod points;
pub mod problems;
pub mod sindy;
pub mod smoother;
pub mod solver;
pub mod tuning;

pub use equation::{
    equation_discovery_error, eval_equation, fit_equation, grad_equation, LearnedEquation, ScalarField,
};
pub use error::{Error, Result};
pub use gram::{gram, regularized_solve, Functional, GramFactorization};
pub use kernel::{kernel_deriv, kernel_eval, DiffOp, KernelSpec, MultiIndex};
pub use points::Points;
pub use problems::ProblemId;
pub use smoother::{build_features, eval_smoothed, fit_smoother, FieldSamples, SmoothedField};
