//! Trajectory auto-complete for shared-autonomy teleoperation.
//!
//! A masked transformer forecasts future end-effector states and actions from
//! a partial trajectory. The forecast drives a toy kinematic manipulation
//! world in closed loop, and an operator (or a scripted stand-in) can take
//! over at any time; their actions enter the model context exactly like the
//! model's own.

pub mod autodiff;
pub mod config;
pub mod demos;
pub mod error;
pub mod geometry;
pub mod model;
pub mod rollout;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
