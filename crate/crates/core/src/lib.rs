//! Mutual adversarial training at desk scale: classifier cohorts that share
//! robustness through distillation, a PGD-family attack toolbox, and an
//! evaluation harness for single- and multi-perturbation robustness.

pub mod error;
pub mod eval;
pub mod attacks;
pub mod data;
pub mod losses;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{MatError, Result};
