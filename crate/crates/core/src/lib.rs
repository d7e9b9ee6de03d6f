//! Cross-instance reconstruction for domain-generalizable action
//! recognition on pre-extracted clip features, plus the baselines and
//! experiment harness around it.

pub mod baselines;
pub mod cir;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ndmath;
pub mod objective;
pub mod seed;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{CirError, Result};
