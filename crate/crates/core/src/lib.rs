//! Parameter-efficient transfer for a toy dual-encoder vision-language model.
//!
//! The crate holds a small reverse-mode autodiff [`tensor`] engine, a frozen
//! visual/text transformer pair ([`encoders`]), the trainable surface of deep
//! visual prompts, a shallow text prompt and a text adapter ([`tuning`]),
//! the training loop ([`training`]), distance-driven adaptive ensembling at
//! inference ([`inference`]), and the evaluation [`metrics`].

pub mod encoders;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod tuning;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
