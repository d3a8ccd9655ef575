//! Reverse-mode differentiation over dense `f64` arrays, Adam, and the
//! parameter checkpoint format.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader,
    ParamEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use graph::{
    bce_with_logit, sigmoid, Activation, AttnMask, Gradients, Graph, PoseTargets, Var, LN_EPS,
};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
