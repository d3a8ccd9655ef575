//! Per-connection session state machine. It performs no I/O: the server feeds
//! it client messages, ticks and finished forecasts, and ships whatever it
//! returns.

use std::collections::VecDeque;
use std::sync::Arc;

use teleop_core::demos::{episode_start, GenConfig};
use teleop_core::error::Result;
use teleop_core::geometry::Pose;
use teleop_core::model::{ActionVector, TrajectoryModel, Window};
use teleop_core::rollout::{
    forecast_window, ControlSession, Forecast, Mode, RolloutConfig, StepOutcome,
};

use crate::protocol::{ClientMessage, ServerMessage};

/// Shared, read-only server state.
#[derive(Debug, Clone)]
pub struct ServiceContext {
    pub model: Arc<TrajectoryModel>,
    pub gen: GenConfig,
    pub rollout: RolloutConfig,
}

/// Forecast request on a snapshot of the session's window.
pub struct ForecastJob {
    pub episode: u64,
    origin: usize,
    window: Window,
    model: Arc<TrajectoryModel>,
    t_f: usize,
}

impl ForecastJob {
    pub fn run(self) -> (u64, Result<Forecast>) {
        (
            self.episode,
            forecast_window(&self.model, &self.window, self.t_f, self.origin),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Command {
    Takeover,
    Action(ActionVector),
    Release,
}

pub struct Live {
    ctx: Arc<ServiceContext>,
    episode: u64,
    seed: u64,
    session: Option<ControlSession>,
    /// Operator holds control (as of the last received message).
    operator: bool,
    queue: VecDeque<Command>,
    forecast_pending: bool,
    ended: bool,
}

impl Live {
    pub fn new(ctx: Arc<ServiceContext>) -> Live {
        Live {
            ctx,
            episode: 0,
            seed: 0,
            session: None,
            operator: false,
            queue: VecDeque::new(),
            forecast_pending: false,
            ended: false,
        }
    }

    pub fn session(&self) -> Option<&ControlSession> {
        self.session.as_ref()
    }

    pub fn is_running(&self) -> bool {
        self.session.is_some() && !self.ended
    }

    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(m) => self.handle(m),
            Err(e) => vec![ServerMessage::error(format!("malformed message: {e}"))],
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Reset { task, seed } => match self.reset(task, seed) {
                Ok(m) => m,
                Err(e) => vec![ServerMessage::error(format!("reset failed: {e}"))],
            },
            _ if !self.is_running() => {
                vec![ServerMessage::error("no active episode; send reset first")]
            }
            ClientMessage::Takeover => {
                if self.operator {
                    return vec![ServerMessage::error("already in manual control")];
                }
                self.operator = true;
                self.queue.push_back(Command::Takeover);
                vec![]
            }
            ClientMessage::Release => {
                if !self.operator {
                    return vec![ServerMessage::error("release without takeover")];
                }
                self.operator = false;
                self.queue.push_back(Command::Release);
                vec![]
            }
            ClientMessage::ManualAction { target, gripper } => {
                if !self.operator {
                    return vec![ServerMessage::error(
                        "manual_action is only accepted between takeover and release",
                    )];
                }
                let target = match Pose::new(
                    [target[0], target[1], target[2]],
                    teleop_core::geometry::Quat([target[3], target[4], target[5], target[6]]),
                ) {
                    Ok(p) => p.canonical(),
                    Err(e) => return vec![ServerMessage::error(format!("bad manual_action: {e}"))],
                };
                if !(0.0..=1.0).contains(&gripper) {
                    return vec![ServerMessage::error("gripper must be in [0, 1]")];
                }
                self.queue
                    .push_back(Command::Action(ActionVector { target, gripper }));
                vec![]
            }
        }
    }

    fn reset(&mut self, task: teleop_core::sim::TaskId, seed: u64) -> Result<Vec<ServerMessage>> {
        let spec = self.ctx.gen.tasks.get(task)?.clone();
        let (scene, _) = episode_start(&spec, seed, &self.ctx.gen)?;
        let s = ControlSession::new(
            self.ctx.model.clone(),
            spec,
            scene,
            self.ctx.gen.sim,
            self.ctx.rollout,
        )?;
        self.episode += 1;
        self.seed = seed;
        self.operator = false;
        self.queue.clear();
        self.forecast_pending = false;
        self.ended = false;
        let mut out = vec![ServerMessage::state(
            s.scene(),
            seed,
            s.mode(),
            s.counters(),
        )];
        self.session = Some(s);
        out.extend(self.end_if_done());
        Ok(out)
    }

    fn end_if_done(&mut self) -> Option<ServerMessage> {
        let s = self.session.as_ref()?;
        if self.ended || !s.is_done() {
            return None;
        }
        self.ended = true;
        let c = s.counters();
        Some(ServerMessage::EpisodeEnd {
            success: s.outcome() == StepOutcome::Success,
            steps: c.sim_steps,
            manual_steps: c.manual_steps,
            manual_time_s: c.manual_steps as f64 * s.scene().dt,
            interventions: c.interventions,
        })
    }

    fn fail(&mut self, msg: String) -> Vec<ServerMessage> {
        self.ended = true;
        let mut out = vec![ServerMessage::error(msg)];
        if let Some(s) = &self.session {
            let c = s.counters();
            out.push(ServerMessage::EpisodeEnd {
                success: false,
                steps: c.sim_steps,
                manual_steps: c.manual_steps,
                manual_time_s: c.manual_steps as f64 * s.scene().dt,
                interventions: c.interventions,
            });
        }
        out
    }

    /// One server tick: applies pending mode switches, executes at most one
    /// simulator step and reports the state. May ask for a forecast.
    pub fn tick(&mut self) -> (Vec<ServerMessage>, Option<ForecastJob>) {
        if !self.is_running() {
            return (vec![], None);
        }
        let session = self.session.as_mut().expect("running");
        let mut stepped = None;
        while let Some(cmd) = self.queue.front().copied() {
            match cmd {
                Command::Takeover => session.takeover(),
                Command::Release => session.release(),
                Command::Action(a) => {
                    if stepped.is_none() {
                        stepped = Some(session.manual_step(a));
                    } else {
                        break;
                    }
                }
            }
            self.queue.pop_front();
        }
        if stepped.is_none() && session.mode() == Mode::Auto && session.has_usable_forecast() {
            stepped = Some(session.step_auto_once());
        }
        if let Some(Err(e)) = stepped {
            return (self.fail(format!("step failed: {e}")), None);
        }
        let session = self.session.as_ref().expect("running");
        let mut out = vec![ServerMessage::state(
            session.scene(),
            self.seed,
            session.mode(),
            session.counters(),
        )];
        out.extend(self.end_if_done());
        let session = self.session.as_ref().expect("running");
        let wants = session.mode() == Mode::Manual || !session.has_usable_forecast();
        let job = if !self.ended && wants && !self.forecast_pending {
            match session.window() {
                Ok(window) => {
                    self.forecast_pending = true;
                    Some(ForecastJob {
                        episode: self.episode,
                        origin: session.counters().sim_steps,
                        window,
                        model: self.ctx.model.clone(),
                        t_f: self.ctx.rollout.t_f,
                    })
                }
                Err(e) => return (self.fail(format!("forecast failed: {e}")), None),
            }
        } else {
            None
        };
        (out, job)
    }

    /// A forecast job finished. Results from earlier episodes are ignored.
    pub fn accept_forecast(
        &mut self,
        episode: u64,
        result: Result<Forecast>,
    ) -> Vec<ServerMessage> {
        if episode != self.episode {
            return vec![];
        }
        self.forecast_pending = false;
        if self.ended {
            return vec![];
        }
        let f = match result {
            Ok(f) => f,
            Err(e) => return self.fail(format!("forecast failed: {e}")),
        };
        let msg = ServerMessage::forecast(&f);
        if let Some(s) = self.session.as_mut() {
            s.offer_forecast(f);
        }
        vec![msg]
    }

    /// Runs a job inline; for callers without a worker pool.
    pub fn tick_blocking(&mut self) -> Vec<ServerMessage> {
        let (mut out, job) = self.tick();
        if let Some(j) = job {
            let (ep, r) = j.run();
            out.extend(self.accept_forecast(ep, r));
        }
        out
    }
}
