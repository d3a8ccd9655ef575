//! Trajectory sequence model: vector layouts, the context window and the transformer.

mod transformer;
mod types;

pub use transformer::{
    decode_action_row, decode_state_row, ModelOutput, Prediction, TrajectoryModel,
};
pub use types::{
    object_col, state_dim, ActionVector, AttentionMode, ModelConfig, StateVector, Window,
    ACTION_DIM, ACTION_GRIPPER_COL, POSE_DIM, STATE_GRIPPER_COL,
};
