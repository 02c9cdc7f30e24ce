//! Self-knowledge distillation with an adversarial critic on logits.

pub mod augment;
pub mod data;
pub mod divergence;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod training;
pub mod util;

pub use error::{Error, Result};
