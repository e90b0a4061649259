//! Nonlinear expectations generated by fully nonlinear parabolic PDEs.
//!
//! The crate builds generators `G` (sublinear, Isaacs, or derived from
//! G-SDE coefficients), solves the associated Cauchy problems with a
//! monotone explicit scheme, assembles conditional expectations of cylinder
//! functionals from the solution semigroup, and checks martingale and
//! weak-solution identities against closed forms and Monte-Carlo bounds.

pub mod config;
pub mod error;
pub mod expectation;
pub mod expr;
pub mod fixtures;
pub mod generator;
pub mod grid;
pub mod gsde;
pub mod martingale;
pub mod oracle;
pub mod path;
pub mod pde;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
pub use expectation::{conditional, expectation, CylinderFunctional, ExpectationOptions};
pub use expr::Expr;
pub use generator::{ControlPoint, Generator, GeneratorSpec};
pub use grid::{Field, Grid, Payoff, Window};
pub use pde::{solve_cauchy, SchemeBudget, SolveOptions};
pub use report::ResidualReport;
