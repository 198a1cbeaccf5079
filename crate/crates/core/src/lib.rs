//! Decoupled visual/reasoning confidence calibration on a synthetic grid
//! environment, trained with group-relative policy optimization.

pub mod certainty;
pub mod cli;
pub mod confidence;
pub mod distributions;
pub mod env;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod metrics;
pub mod parallel;
pub mod seeding;

pub use error::{Error, Result};
