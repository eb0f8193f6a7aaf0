#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Control-coherent Koopman models of a compliant two-link arm, DMDc and
//! bilinear baselines, and model predictive tracking control.

pub mod arm;
pub mod bench;
pub mod config;
pub mod error;
pub mod fit;
pub mod lifting;
pub mod mpc;
pub mod persist;

pub use error::{Error, Result};
