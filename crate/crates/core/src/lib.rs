//! Domain-adversarial training with a gradient reversal layer: model,
//! losses, training, data, stain normalization, attribution and evaluation.

pub mod attribution;
pub mod checkpoint;
pub mod data;
mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod stain;
pub mod trainer;

pub use error::{Error, Result};
