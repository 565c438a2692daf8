//! Characteristic-based solver for linear and quasilinear first-order
//! hyperbolic boundary-value problems on the strip `[0, 1] x R`.
//!
//! The crate is `no_std` and only needs `alloc`. Enable the `parallel`
//! feature to spread node sweeps over a rayon pool.
//!
//! Layers, bottom to top:
//!
//! * [`expr`] parses and differentiates the coefficient language.
//! * [`fields`] holds grids, grid fields and validated system descriptions.
//! * [`characteristics`] traces characteristic curves and their weights.
//! * [`boundary`] implements reflection/delay/integral boundary operators.
//! * [`operators`] assembles the integral operators and trace transfer maps.
//! * [`conditions`] evaluates dissipativity and norm conditions.
//! * [`linear_solver`] and [`quasilinear_solver`] run the fixed-point schemes.
//! * [`scenarios`] builds the loss-of-smoothness counterexample.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(test, feature = "parallel"))]
extern crate std;

pub mod boundary;
pub mod characteristics;
pub mod conditions;
pub mod expr;
pub mod fields;
pub mod linear_solver;
pub mod math;
pub mod operators;
mod par;
pub mod quasilinear_solver;
pub mod scenarios;

pub use boundary::{BoundaryOperatorSpec, DerivedKind};
pub use conditions::{condition_report, ConditionReport};
pub use expr::{parse, Compiled, Expr, Var};
pub use fields::{Coefficients, DiagonalSystem, Grid, GridField, TimeTopology};
pub use linear_solver::{solve_linear, LinearProblem, SolveReport, SolverOptions};
pub use operators::OperatorAssembly;
