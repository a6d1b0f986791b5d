//! Adversarial diffusion distillation at desk scale.

pub mod data;
pub mod diffusion;
pub mod elo;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod nets;
pub mod numcore;
pub mod opt_serde;
pub mod plot;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
