//! Window sampling, loss assembly and the optimization loop.

mod loss;
mod sampling;
mod train;

pub use loss::{
    batch_loss, corner_pose_loss, gripper_bce_loss, total_loss, BatchTargets, LossParts, LossVars,
    LossWeights,
};
pub use sampling::{sample_subsequence, sample_tp, slice_at, Slice};
pub use train::{
    curve_csv, evaluate_loss, sample_batch, train_loop, Batch, LossRecord, TrainConfig,
    TrainOutputs, TrainReport, CURVE_HEADER,
};
