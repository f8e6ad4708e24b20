//! Numerical laboratory for nonautonomous linear systems with nonuniform
//! exponential dichotomies and their quasilinear perturbations: flows, Green
//! kernels, constant fits, solvability conditions, conjugacy maps, and
//! verification reports.

// Negated float comparisons (`!(x > 0.0)`) are deliberate: they also reject
// NaN, which `x <= 0.0` lets through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditions;
pub mod conjugacy;
pub mod dichotomy;
pub mod error;
pub mod expr;
pub mod flow;
pub mod linalg;
pub mod ode;
pub mod scalar;
pub mod system;
pub mod verify;
pub mod weighted;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete scalar used by all engines and reports; the expression evaluator
/// and the integrator stay generic over [`Real`].
pub type Scalar = f64;
