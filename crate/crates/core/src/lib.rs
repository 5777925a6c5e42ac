//! Delay-aware hierarchical federated learning: a simulator of the training
//! protocol, its convergence analysis, the online controller and the
//! network cost model.

// Negated float comparisons also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod config;
pub mod control;
pub mod data;
pub mod engine;
pub mod error;
pub mod fleet;
pub mod losses;
pub mod metrics;
pub mod netcost;
pub mod rng;
pub mod validation;
pub mod vector;

pub use error::{DflError, Result};
