//! Toy multimodal decoder with first-order logit-attribution saliency maps,
//! a box-alignment reward, and a group-relative policy-gradient trainer.

pub mod data;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod image;
pub mod model;
pub mod render;
pub mod reward;
pub mod saliency;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
