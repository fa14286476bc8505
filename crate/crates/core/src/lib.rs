//! Girsanov-corrected Milstein schemes for stochastic differential equations.

pub mod error;
pub mod experiments;
pub mod girsanov;
pub mod oscillators;
pub mod sde;
pub mod steppers;

pub use error::{Error, Result};
