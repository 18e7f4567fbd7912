//! Minimal differentiable network kernel.

pub mod backbone;
pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod tape;

pub use backbone::{
    backbone_forward, consistency_apply, consistency_forward, BackboneConfig, ConditionEmbedding,
};
pub use checkpoint::{Checkpoint, NamedArray};
pub use optim::{ema_update, AdamW, AdamWConfig};
pub use params::{Gradients, ModelParams};
pub use tape::{Tape, Var};
