//! The toy decoder-only multimodal transformer.

pub mod config;
pub mod forward;
pub mod params;
pub mod seq;
pub mod taped;

pub use config::{special, ModelConfig};
pub use forward::{
    forward_with_trace, generate, generate_with_logprobs, sequence_logprob, ForwardTrace,
    IncrementalState,
};
pub use params::{init_model, load_checkpoint, save_checkpoint, ModelParams};
pub use seq::{Segment, SegmentedSequence};
pub use taped::TapedModel;
