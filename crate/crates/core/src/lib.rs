//! Partial-logic regularization (PL-Reg) with the pieces needed to train and
//! evaluate it at desk scale: a reverse-mode autodiff core, the model blocks,
//! the regularizer losses, synthetic task protocols, Hungarian-matched
//! evaluation, training loops and an experiment runner.

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod protocols;
pub mod trainer;

pub use error::{Error, Result};
