use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{positional_tokens, BoxExtents, Pose, TokenScale, DEFAULT_BIN_SIZE};
use crate::model::{ActionVector, StateVector, TrajectoryModel, Window};
use crate::sim::{check_success, Scene, SimParams, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// History capacity and largest context length.
    pub t_p_eval: usize,
    /// Forecast length.
    pub t_f: usize,
    /// Forecast actions executed before re-forecasting.
    pub t_e: usize,
    /// Length of one scripted corrective burst.
    pub takeover_steps: usize,
    pub extents: [f64; 3],
    pub bin_size: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            t_p_eval: 250,
            t_f: 150,
            t_e: 10,
            takeover_steps: 10,
            extents: [0.05; 3],
            bin_size: DEFAULT_BIN_SIZE,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, model: &TrajectoryModel) -> Result<()> {
        let seq = model.config().seq_len;
        let bad = |m: String| Err(Error::Config(m));
        if self.t_p_eval == 0 || self.t_f == 0 || self.t_e == 0 {
            return bad("t_p_eval, t_f and t_e must be positive".into());
        }
        if self.t_e > self.t_f {
            return bad(format!("t_e ({}) exceeds t_f ({})", self.t_e, self.t_f));
        }
        if self.t_p_eval + self.t_f > seq {
            return bad(format!(
                "t_p_eval + t_f = {} exceeds the model's seq_len {seq}",
                self.t_p_eval + self.t_f
            ));
        }
        BoxExtents::new(self.extents)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub sim_steps: usize,
    pub auto_steps: usize,
    pub manual_steps: usize,
    pub interventions: usize,
}

/// Predicted rows for slots `[T_p, T_p + T_f)`; `origin` is the simulator
/// step the first row refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub origin: usize,
    pub states: Vec<StateVector>,
    pub actions: Vec<ActionVector>,
}

impl Forecast {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn ee_poses(&self) -> Vec<Pose> {
        self.states.iter().map(|s| s.ee).collect()
    }
}

/// Runs the model on `window` and returns slots `[T_p, T_p + t_f)`.
pub fn forecast_window(
    model: &TrajectoryModel,
    window: &Window,
    t_f: usize,
    origin: usize,
) -> Result<Forecast> {
    let t_p = window.t_p();
    let end = t_p + t_f;
    if end > window.seq_len() {
        return Err(Error::InvalidInput(format!(
            "forecast [{t_p}, {end}) exceeds seq_len {}",
            window.seq_len()
        )));
    }
    let mut pred = model.predict(window)?;
    pred.states.truncate(end);
    pred.actions.truncate(end);
    Ok(Forecast {
        origin,
        states: pred.states.split_off(t_p),
        actions: pred.actions.split_off(t_p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Running,
    Success,
    Timeout,
}

/// Live closed-loop state of one episode. The history only ever holds rows
/// `(s_t, a_t)` that were actually executed; the current observation is the
/// state of the next row.
#[derive(Debug, Clone)]
pub struct ControlSession {
    model: Arc<TrajectoryModel>,
    task: TaskSpec,
    sim: SimParams,
    cfg: RolloutConfig,
    scene: Scene,
    history: VecDeque<(StateVector, ActionVector)>,
    mode: Mode,
    forecast: Option<Forecast>,
    counters: Counters,
    outcome: StepOutcome,
    segment_started: bool,
}

impl ControlSession {
    /// Starts from `scene` and executes [`ActionVector::HOLD`], the first row
    /// of every demonstration.
    pub fn new(
        model: Arc<TrajectoryModel>,
        task: TaskSpec,
        scene: Scene,
        sim: SimParams,
        cfg: RolloutConfig,
    ) -> Result<ControlSession> {
        cfg.validate(&model)?;
        if scene.task != task.id {
            return Err(Error::InvalidInput(format!(
                "scene of {} given to a {} session",
                scene.task, task.id
            )));
        }
        let mut s = ControlSession {
            model,
            task,
            sim,
            cfg,
            scene,
            history: VecDeque::with_capacity(cfg.t_p_eval),
            mode: Mode::Auto,
            forecast: None,
            counters: Counters::default(),
            outcome: StepOutcome::Running,
            segment_started: false,
        };
        if s.task.horizon == 0 {
            s.outcome = StepOutcome::Timeout;
        } else {
            s.execute(ActionVector::HOLD)?;
            s.counters.auto_steps += 1;
        }
        Ok(s)
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Arc<TrajectoryModel> {
        &self.model
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn outcome(&self) -> StepOutcome {
        self.outcome
    }

    pub fn is_done(&self) -> bool {
        self.outcome != StepOutcome::Running
    }

    pub fn history(&self) -> impl ExactSizeIterator<Item = &(StateVector, ActionVector)> {
        self.history.iter()
    }

    pub fn cached_forecast(&self) -> Option<&Forecast> {
        self.forecast.as_ref()
    }

    /// Context window over the retained history; tokens restart at its first row.
    pub fn window(&self) -> Result<Window> {
        if self.history.is_empty() {
            return Err(Error::InvalidInput(
                "forecast needs a non-empty history".into(),
            ));
        }
        let j_max = self.model.config().j_max;
        let path: Vec<Pose> = self.history.iter().map(|(s, _)| s.ee).collect();
        let tokens = positional_tokens(
            &path,
            &BoxExtents::new(self.cfg.extents)?,
            &TokenScale {
                bin_size: self.cfg.bin_size,
                vocab_max: self.model.config().vocab_max,
            },
        )?;
        let states: Vec<Vec<f64>> = self
            .history
            .iter()
            .map(|(s, _)| {
                debug_assert_eq!(s.j_max(), j_max);
                s.to_vec()
            })
            .collect();
        let actions: Vec<Vec<f64>> = self.history.iter().map(|(_, a)| a.to_vec()).collect();
        Window::from_rows(
            self.model.config().seq_len,
            states.len(),
            &states,
            &actions,
            &tokens,
        )
    }

    /// Pure forecast from the current history; the session is not changed.
    pub fn forecast(&self) -> Result<Forecast> {
        let w = self.window()?;
        forecast_window(&self.model, &w, self.cfg.t_f, self.counters.sim_steps)
    }

    /// Installs a forecast computed elsewhere (e.g. on a snapshot). Stale
    /// forecasts are refused.
    pub fn offer_forecast(&mut self, f: Forecast) -> bool {
        if f.origin != self.counters.sim_steps || self.mode != Mode::Auto {
            return false;
        }
        self.forecast = Some(f);
        true
    }

    /// True when the next auto step can run without a new forecast.
    pub fn has_usable_forecast(&self) -> bool {
        self.forecast
            .as_ref()
            .is_some_and(|f| self.counters.sim_steps - f.origin < self.cfg.t_e.min(f.len()))
    }

    fn execute(&mut self, a: ActionVector) -> Result<StepOutcome> {
        let s = self.scene.observe(self.model.config().j_max);
        let next = self.scene.step(&a, &self.sim)?;
        self.scene = next;
        if self.history.len() == self.cfg.t_p_eval {
            self.history.pop_front();
        }
        self.history.push_back((s, a));
        self.counters.sim_steps += 1;
        self.outcome = if check_success(&self.scene, &self.task) {
            StepOutcome::Success
        } else if self.counters.sim_steps >= self.task.horizon {
            StepOutcome::Timeout
        } else {
            StepOutcome::Running
        };
        Ok(self.outcome)
    }

    /// Executes the next action of the current forecast, forecasting first
    /// when needed. The forecast is dropped after `T_e` executed actions.
    pub fn step_auto_once(&mut self) -> Result<StepOutcome> {
        if self.is_done() {
            return Ok(self.outcome);
        }
        if self.mode != Mode::Auto {
            return Err(Error::InvalidInput(
                "auto step requested in manual mode".into(),
            ));
        }
        if !self.has_usable_forecast() {
            let f = self.forecast()?;
            self.forecast = Some(f);
        }
        let f = self.forecast.as_ref().expect("forecast present");
        let k = self.counters.sim_steps - f.origin;
        let a = f.actions[k];
        let out = self.execute(a)?;
        self.counters.auto_steps += 1;
        if k + 1 >= self.cfg.t_e {
            self.forecast = None;
        }
        Ok(out)
    }

    /// Executes up to `T_e` forecast actions open-loop.
    pub fn step_auto(&mut self) -> Result<StepOutcome> {
        if !self.has_usable_forecast() {
            self.forecast = None;
        }
        for _ in 0..self.cfg.t_e {
            if self.step_auto_once()? != StepOutcome::Running {
                break;
            }
            if self.forecast.is_none() {
                break;
            }
        }
        Ok(self.outcome)
    }

    /// Enters manual mode; the forecast cache is discarded.
    pub fn takeover(&mut self) {
        self.mode = Mode::Manual;
        self.forecast = None;
        self.segment_started = false;
    }

    /// Back to auto mode; the next auto step re-forecasts.
    pub fn release(&mut self) {
        self.mode = Mode::Auto;
        self.forecast = None;
    }

    /// One human action. Only valid in manual mode.
    pub fn manual_step(&mut self, a: ActionVector) -> Result<StepOutcome> {
        if self.mode != Mode::Manual {
            return Err(Error::InvalidInput(
                "manual action outside a takeover".into(),
            ));
        }
        if self.is_done() {
            return Ok(self.outcome);
        }
        if !self.segment_started {
            self.segment_started = true;
            self.counters.interventions += 1;
        }
        let out = self.execute(a)?;
        self.counters.manual_steps += 1;
        Ok(out)
    }

    /// Executes human actions verbatim and returns to auto mode.
    pub fn intervene(&mut self, actions: &[ActionVector]) -> Result<StepOutcome> {
        let mut i = 0;
        self.intervene_with(actions.len(), |_| {
            i += 1;
            Ok(actions[i - 1])
        })
    }

    /// Like [`intervene`](Self::intervene) with each action chosen from the
    /// live scene (used by scripted operators).
    pub fn intervene_with(
        &mut self,
        n: usize,
        mut policy: impl FnMut(&Scene) -> Result<ActionVector>,
    ) -> Result<StepOutcome> {
        if n == 0 || self.is_done() {
            return Ok(self.outcome);
        }
        let prev = self.mode;
        self.takeover();
        let mut res = Ok(self.outcome);
        for _ in 0..n {
            res = policy(&self.scene).and_then(|a| self.manual_step(a));
            if !matches!(res, Ok(StepOutcome::Running)) {
                break;
            }
        }
        if prev == Mode::Auto {
            self.release();
        }
        res
    }
}
