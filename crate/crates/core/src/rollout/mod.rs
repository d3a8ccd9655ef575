//! Closed-loop execution of the model in the simulator, interventions and
//! benchmark reports.

mod episode;
mod session;

pub use episode::{
    benchmark, drive, eval_seeds, run_episode, summarize, BenchmarkReport, BenchmarkRow,
    BenchmarkSpec, EpisodeResult, EvalMode, ExpertControl, InterventionPolicy, NoIntervention,
    ScriptedCorrection, REPORT_HEADER,
};
pub use session::{
    forecast_window, ControlSession, Counters, Forecast, Mode, RolloutConfig, StepOutcome,
};
