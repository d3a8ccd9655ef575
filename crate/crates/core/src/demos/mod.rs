//! Scripted demonstrations: the waypoint expert and dataset persistence.

mod dataset;
mod expert;

pub use dataset::{
    decode_trajectory, demo_seeds, encode_trajectory, episode_start, generate_dataset,
    load_dataset, load_trajectory, record_expert, replay, save_trajectory, Dataset,
    DatasetManifest, GenConfig, Trajectory, DATASET_VERSION, MANIFEST_FILE, REPLAY_TOL,
};
pub use expert::{Expert, ExpertParams};
