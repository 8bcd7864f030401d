//! The toy decoder-only transformer: configuration, weights, checkpoints and
//! the cached forward pass.

mod checkpoint;
mod config;
mod forward;
pub mod kernels;
mod weights;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::ModelConfig;
pub use forward::{
    attend, forward_segment, greedy_pick, greedy_pick_excluding, project_segment, rope_rotate,
    rotate_pair_f32, HiddenRows, ProjectionTriple,
};
pub use weights::{LayerWeights, ModelWeights, INIT_STD};

#[cfg(test)]
mod tests;
