//! Zeroth-order optimization with seed-replayed perturbations.

pub mod analysis;
mod error;
pub mod estimators;
pub mod harness;
pub mod objectives;
pub mod optimizers;
pub mod perturb;

pub use error::{Result, ZoError};
