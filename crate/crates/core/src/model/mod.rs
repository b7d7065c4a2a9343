//! The full network: embedding, a U-shaped stack of temporal blocks with
//! pooling between levels and additive skips, and the output head.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use checkpoint::CheckpointBundle;
pub use config::{ModelConfig, RunConfig, TrainConfig, VOCAB};
pub use forward::{forward_logits, shifted_inputs};
pub use params::{count_params, param_specs, Init, ParamCount, ParamSet, ParamSpec};
