//! Contraction-certified neural feedback control: interval bounds on
//! controller Jacobians, neural contraction metrics, training, certification
//! and simulation.

// Negated float comparisons are used on purpose so NaN lands in the
// rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod cli;
pub mod domain;
pub mod error;
pub mod ibp;
pub mod linalg;
pub mod ncm;
pub mod nn;
pub mod sim;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Mat;
