//! LoRA-Loop: continual learning for a toy dual-encoder vision-language
//! model with synthetic replay from a LoRA-adapted diffusion generator.

pub mod continual;
pub mod distill;
pub mod error;
pub mod generator;
pub mod lora;
pub mod numcore;
pub mod selection;
pub mod taskgen;
pub mod vlm;

pub use error::{Error, Result};
