//! Hitting and transition matrices between distant sites for recurrent random walks
//! on `Z^d` and Markov `Z^d`-extensions of finite-state systems.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod asymptotics;
pub mod base;
pub mod error;
pub mod exactpotential;
pub mod harness;
pub mod lmatrix;
pub mod montecarlo;
pub mod numeric;

pub use error::{Error, Result};
