#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backward_solver;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod families;
pub mod forward_solver;
pub mod gaussian_flow;
pub mod linalg;
pub mod output;
pub mod problem;
pub mod quadrature;
pub mod regression;
pub mod rng;
pub mod tcl;

pub use error::{Error, Result};
