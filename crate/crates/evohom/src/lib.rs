//! Evolutionary equations in exponentially weighted spaces and their homogenization.

pub mod cli_harness;
pub mod error;
pub mod evo_solver;
pub mod exec;
pub mod homogenizer;
pub mod linalg;
pub mod operator_calculus;
pub mod scenario_suite;
pub mod weighted_space;

pub use error::{EvoError, Result};
pub use linalg::{Coef, Mat, C64};
