//! Constant-step-size first-order methods for nonsmooth tame objectives.
//!
//! The crate has five layers:
//!
//! * [`expr`] — a small expression language (polynomials, `abs`, fractional
//!   powers of `abs`, `max`/`min`) that stays locally Lipschitz by
//!   construction, plus composite sum objectives.
//! * [`subdiff`] — Clarke subdifferential selections, explicit set models at
//!   kinks, and min-norm distance queries `d(0, ∂f(x))`.
//! * [`methods`] — the subgradient method with momentum, random reshuffling
//!   with momentum, and random-permutations cyclic coordinate descent, all
//!   with full trace capture.
//! * [`flow`] — an explicit Euler integrator for the descent differential
//!   inclusion `x'(t) ∈ -c ∂f(x(t))`, descent quadrature, and shadowing
//!   error measurement between method iterates and trajectories.
//! * [`landscape`] — grid estimation of the critical set and its connected
//!   components, stability verdicts for traces, and a coercive wrapper.

pub mod expr;
pub mod flow;
pub mod landscape;
pub mod methods;
pub mod subdiff;

pub(crate) mod vecops;

pub use expr::{parse, Expr, ParseError, Point, Smoothness, SumFunction};
pub use subdiff::{
    clarke_model, clarke_select, min_norm_distance, min_norm_point, partial_select, AbsRule,
    ModelError, SelectionRule, SubgradientModel, TieRule,
};
