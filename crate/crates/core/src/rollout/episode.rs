use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::session::{ControlSession, Forecast, RolloutConfig};
use crate::demos::{episode_start, Expert, GenConfig};
use crate::error::{Error, Result};
use crate::geometry::{corner_distance, BoxExtents};
use crate::model::TrajectoryModel;
use crate::sim::{TaskId, TaskSpec};

/// Benchmark column: who drives the robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Model only.
    Auto,
    /// Model with the scripted corrective operator.
    Assistive,
    /// Scripted expert only.
    Manual,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Auto, EvalMode::Assistive, EvalMode::Manual];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Auto => "auto",
            EvalMode::Assistive => "assistive",
            EvalMode::Manual => "manual",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<EvalMode> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!("unknown mode {s:?} (auto, assistive, manual)"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: TaskId,
    pub seed: u64,
    pub mode: EvalMode,
    pub success: bool,
    pub steps: usize,
    pub manual_steps: usize,
    pub manual_time_s: f64,
    pub interventions: usize,
}

/// Decides, before each auto cycle, whether to take over.
pub trait InterventionPolicy {
    /// May drive `session` through `intervene*`; returns true if it did.
    fn intervene(&mut self, session: &mut ControlSession, forecast: &Forecast) -> Result<bool>;
}

/// Never intervenes.
pub struct NoIntervention;

impl InterventionPolicy for NoIntervention {
    fn intervene(&mut self, _: &mut ControlSession, _: &Forecast) -> Result<bool> {
        Ok(false)
    }
}

/// Stand-in for the operator: when the forecast end-effector pose `T_e`
/// steps ahead is farther from the expert's current waypoint than the present
/// pose is, the expert drives for `takeover_steps`.
pub struct ScriptedCorrection {
    pub expert: Expert,
    pub extents: BoxExtents,
    pub steps: usize,
}

impl ScriptedCorrection {
    pub fn heading_away(&self, session: &ControlSession, forecast: &Forecast) -> bool {
        let scene = session.scene();
        let Ok(wp) = self.expert.waypoint(scene) else {
            return false;
        };
        let Some(k) = forecast.len().checked_sub(1) else {
            return false;
        };
        let ahead = forecast.states[session.config().t_e.min(k)].ee;
        corner_distance(&ahead, &wp, &self.extents) > corner_distance(&scene.ee, &wp, &self.extents)
    }
}

impl InterventionPolicy for ScriptedCorrection {
    fn intervene(&mut self, session: &mut ControlSession, forecast: &Forecast) -> Result<bool> {
        if !self.heading_away(session, forecast) {
            return Ok(false);
        }
        let expert = &self.expert;
        session.intervene_with(self.steps, |s| expert.act(s))?;
        Ok(true)
    }
}

/// Expert drives every step; the model is never consulted.
pub struct ExpertControl {
    pub expert: Expert,
}

impl InterventionPolicy for ExpertControl {
    fn intervene(&mut self, session: &mut ControlSession, _: &Forecast) -> Result<bool> {
        let expert = &self.expert;
        let n = session.task().horizon;
        session.intervene_with(n, |s| expert.act(s))?;
        Ok(true)
    }
}

/// Loop {forecast, policy, step_auto} until success or the horizon.
/// The expert giving up (no valid waypoint) ends the episode as a failure.
pub fn drive(session: &mut ControlSession, policy: &mut dyn InterventionPolicy) -> Result<()> {
    while !session.is_done() {
        let f = session.forecast()?;
        match policy.intervene(session, &f) {
            Ok(true) => continue,
            Ok(false) => {}
            Err(Error::Generation(msg)) => {
                log::debug!("operator gave up: {msg}");
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        session.offer_forecast(f);
        session.step_auto()?;
    }
    Ok(())
}

fn result_of(session: &ControlSession, seed: u64, mode: EvalMode, dt: f64) -> EpisodeResult {
    let c = session.counters();
    EpisodeResult {
        task: session.task().id,
        seed,
        mode,
        success: session.outcome() == super::session::StepOutcome::Success,
        steps: c.sim_steps,
        manual_steps: c.manual_steps,
        manual_time_s: c.manual_steps as f64 * dt,
        interventions: c.interventions,
    }
}

pub fn run_episode(
    model: &Arc<TrajectoryModel>,
    task: &TaskSpec,
    seed: u64,
    mode: EvalMode,
    gen: &GenConfig,
    cfg: &RolloutConfig,
) -> Result<EpisodeResult> {
    let (scene, expert) = episode_start(task, seed, gen)?;
    let mut session = ControlSession::new(model.clone(), task.clone(), scene, gen.sim, *cfg)?;
    match mode {
        EvalMode::Auto => drive(&mut session, &mut NoIntervention)?,
        EvalMode::Assistive => drive(
            &mut session,
            &mut ScriptedCorrection {
                expert,
                extents: BoxExtents::new(cfg.extents)?,
                steps: cfg.takeover_steps,
            },
        )?,
        EvalMode::Manual => drive(&mut session, &mut ExpertControl { expert })?,
    }
    Ok(result_of(&session, seed, mode, gen.sim.dt))
}

/// Held-out scene seeds for evaluation; disjoint streams from the ones used
/// to pick demonstration seeds.
pub fn eval_seeds(task: TaskId, seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = TaskId::ALL.iter().position(|t| *t == task).unwrap_or(0) as u64;
    rng.set_stream(1000 + idx);
    (0..n).map(|_| rng.random()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub tasks: Vec<TaskId>,
    pub modes: Vec<EvalMode>,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub task: TaskId,
    pub mode: EvalMode,
    pub n: usize,
    pub success_rate: f64,
    pub mean_manual_time_s: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Effective configuration the report was produced with.
    pub config: Value,
    pub rows: Vec<BenchmarkRow>,
    pub episodes: Vec<EpisodeResult>,
}

pub const REPORT_HEADER: &str = "task,mode,n,success_rate,mean_manual_time_s,mean_steps";

impl BenchmarkReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.task, r.mode, r.n, r.success_rate, r.mean_manual_time_s, r.mean_steps
            )
            .unwrap();
        }
        out
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, task: TaskId, mode: EvalMode) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.task == task && r.mode == mode)
    }
}

pub fn summarize(task: TaskId, mode: EvalMode, eps: &[&EpisodeResult]) -> BenchmarkRow {
    let n = eps.len();
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| {
        if n == 0 {
            0.0
        } else {
            eps.iter().map(|e| f(e)).sum::<f64>() / n as f64
        }
    };
    BenchmarkRow {
        task,
        mode,
        n,
        success_rate: mean(&|e| if e.success { 1.0 } else { 0.0 }),
        mean_manual_time_s: mean(&|e| e.manual_time_s),
        mean_steps: mean(&|e| e.steps as f64),
    }
}

/// Runs every task × mode on the same scene seeds. Episodes run in parallel;
/// the report does not depend on scheduling.
pub fn benchmark(
    model: &Arc<TrajectoryModel>,
    spec: &BenchmarkSpec,
    gen: &GenConfig,
    cfg: &RolloutConfig,
    config: Value,
) -> Result<BenchmarkReport> {
    cfg.validate(model)?;
    let mut jobs = Vec::new();
    for &task in &spec.tasks {
        let seeds = eval_seeds(task, spec.seed, spec.episodes);
        for &mode in &spec.modes {
            jobs.extend(seeds.iter().map(|s| (task, mode, *s)));
        }
    }
    let episodes: Vec<EpisodeResult> = jobs
        .par_iter()
        .map(|(task, mode, seed)| run_episode(model, gen.tasks.get(*task)?, *seed, *mode, gen, cfg))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &task in &spec.tasks {
        for &mode in &spec.modes {
            let eps: Vec<&EpisodeResult> = episodes
                .iter()
                .filter(|e| e.task == task && e.mode == mode)
                .collect();
            rows.push(summarize(task, mode, &eps));
        }
    }
    Ok(BenchmarkReport {
        config,
        rows,
        episodes,
    })
}
