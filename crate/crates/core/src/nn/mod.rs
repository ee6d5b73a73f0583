//! Minimal differentiable network stack: dense layers with feature-wise
//! shift-and-scale conditioning, a hand-written reverse pass, AdamW with EMA
//! weights, and flat-vector checkpoints.

mod checkpoint;
mod mlp;
mod optim;

pub use checkpoint::{load_checkpoint, params_hash, save_checkpoint, CheckpointMeta};
pub use mlp::{
    backward, forward, sinusoidal_embedding, Activation, Linear, Mlp, MlpSpec, Tape,
};
pub use optim::{adamw_step, AdamWConfig, StepReport, TrainState};
