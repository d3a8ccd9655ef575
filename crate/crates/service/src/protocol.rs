//! Wire messages. Every frame is a JSON text frame tagged by `kind`; see
//! `docs/protocol.md` for the full schema.

use serde::{Deserialize, Serialize};
use teleop_core::geometry::Pose;
use teleop_core::model::ActionVector;
use teleop_core::rollout::{Counters, Forecast, Mode};
use teleop_core::sim::{Scene, TaskId};

/// `[x, y, z, qw, qx, qy, qz]`
pub type WirePose = [f64; 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Start a fresh episode.
    Reset { task: TaskId, seed: u64 },
    /// Pause the model; subsequent `manual_action`s drive the robot.
    Takeover,
    /// Hand control back to the model.
    Release,
    /// One end-effector target in the current end-effector frame plus a
    /// gripper command (1 = close). Only honored between takeover and release.
    ManualAction { target: WirePose, gripper: f64 },
}

impl ClientMessage {
    pub fn manual(a: &ActionVector) -> ClientMessage {
        ClientMessage::ManualAction {
            target: a.target.to_array(),
            gripper: a.gripper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: String,
    pub pose: WirePose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    StateUpdate {
        /// Simulator steps executed so far.
        t: usize,
        task: TaskId,
        seed: u64,
        ee: WirePose,
        gripper: f64,
        objects: Vec<ObjectState>,
        drawer_travel: Option<f64>,
        mode: Mode,
        counters: Counters,
        manual_time_s: f64,
    },
    ForecastUpdate {
        /// Step the first predicted pose refers to.
        t: usize,
        ee: Vec<WirePose>,
        /// Predicted gripper command probabilities.
        gripper: Vec<f64>,
    },
    EpisodeEnd {
        success: bool,
        steps: usize,
        manual_steps: usize,
        manual_time_s: f64,
        interventions: usize,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn error(message: impl Into<String>) -> ServerMessage {
        ServerMessage::Error {
            message: message.into(),
        }
    }

    pub fn state(scene: &Scene, seed: u64, mode: Mode, counters: Counters) -> ServerMessage {
        ServerMessage::StateUpdate {
            t: counters.sim_steps,
            task: scene.task,
            seed,
            ee: scene.ee.to_array(),
            gripper: scene.gripper,
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectState {
                    id: o.id.clone(),
                    pose: o.pose.to_array(),
                })
                .collect(),
            drawer_travel: scene.drawer.as_ref().map(|d| d.travel),
            mode,
            counters,
            manual_time_s: counters.manual_steps as f64 * scene.dt,
        }
    }

    pub fn forecast(f: &Forecast) -> ServerMessage {
        ServerMessage::ForecastUpdate {
            t: f.origin,
            ee: f.ee_poses().iter().map(Pose::to_array).collect(),
            gripper: f.actions.iter().map(|a| a.gripper).collect(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::StateUpdate { .. } => "state_update",
            ServerMessage::ForecastUpdate { .. } => "forecast_update",
            ServerMessage::EpisodeEnd { .. } => "episode_end",
            ServerMessage::Error { .. } => "error",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}
