//! Trajectory files (JSON Lines), dataset manifests and generation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::expert::{Expert, ExpertParams};
use crate::autodiff::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::{Quat, UNIT_TOL};
use crate::model::{state_dim, ActionVector, ACTION_DIM, POSE_DIM};
use crate::sim::{check_success, sample_scene, Scene, SimParams, TaskId, TaskRegistry, TaskSpec};

pub const DATASET_VERSION: u32 = 1;

/// Tolerance for replaying recorded actions against recorded states.
pub const REPLAY_TOL: f64 = 1e-9;

/// One demonstration: `states[t]` is observed, then `actions[t]` is taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskId,
    pub seed: u64,
    pub j_max: usize,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// End-effector pose rows (first 7 columns of each state).
    pub fn ee_poses(&self) -> Vec<crate::geometry::Pose> {
        self.states
            .iter()
            .map(|s| crate::geometry::Pose::from_slice(&s[..POSE_DIM]))
            .collect()
    }
}

/// Settings that determine generated data; hashed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub j_max: usize,
    pub sim: SimParams,
    pub expert: ExpertParams,
    pub tasks: TaskRegistry,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            j_max: 2,
            sim: SimParams::default(),
            expert: ExpertParams::default(),
            tasks: TaskRegistry::builtin(),
        }
    }
}

impl GenConfig {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// The initial scene and expert of an episode seed.
pub fn episode_start(task: &TaskSpec, seed: u64, cfg: &GenConfig) -> Result<(Scene, Expert)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(task, &mut rng, &cfg.sim)?;
    let expert = Expert::new(task, cfg.expert, cfg.sim.dt, &mut rng);
    Ok((scene, expert))
}

/// Runs the expert from the scene of `seed`. The first action is always
/// [`ActionVector::HOLD`] so that every history starts the same way.
pub fn record_expert(task: &TaskSpec, seed: u64, cfg: &GenConfig) -> Result<Trajectory> {
    let (mut scene, expert) = episode_start(task, seed, cfg)?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut success = false;
    for t in 0..task.horizon {
        let a = if t == 0 {
            ActionVector::HOLD
        } else {
            expert.act(&scene)?
        };
        states.push(scene.observe(cfg.j_max).to_vec());
        actions.push(a.to_vec());
        scene = scene.step(&a, &cfg.sim)?;
        if check_success(&scene, task) {
            success = true;
            break;
        }
    }
    Ok(Trajectory {
        task: task.id,
        seed,
        j_max: cfg.j_max,
        dt: cfg.sim.dt,
        states,
        actions,
        success,
    })
}

/// Re-simulates the recorded actions and compares the states.
pub fn replay(traj: &Trajectory, cfg: &GenConfig) -> Result<()> {
    let task = cfg.tasks.get(traj.task)?;
    let (mut scene, _) = episode_start(task, traj.seed, cfg)?;
    for (t, (s, a)) in traj.states.iter().zip(&traj.actions).enumerate() {
        let obs = scene.observe(traj.j_max).to_vec();
        let worst = obs
            .iter()
            .zip(s)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if obs.len() != s.len() || worst > REPLAY_TOL {
            return Err(Error::InvalidInput(format!(
                "{} seed {}: replay diverges at t={t} (max error {worst:e})",
                traj.task, traj.seed
            )));
        }
        scene = scene.step(&ActionVector::from_slice(a)?, &cfg.sim)?;
    }
    if check_success(&scene, task) != traj.success {
        return Err(Error::InvalidInput(format!(
            "{} seed {}: recorded success flag does not match the replay",
            traj.task, traj.seed
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    task: TaskId,
    seed: u64,
    #[serde(rename = "J_max")]
    j_max: usize,
    dt: f64,
    format_version: u32,
    #[serde(default)]
    config: Option<Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    t: usize,
    s: Vec<f64>,
    a: Vec<f64>,
}

pub fn encode_trajectory(traj: &Trajectory, config: Option<&Value>) -> String {
    let mut out = String::new();
    let header = Header {
        task: traj.task,
        seed: traj.seed,
        j_max: traj.j_max,
        dt: traj.dt,
        format_version: DATASET_VERSION,
        config: config.cloned(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header")).unwrap();
    for (t, (s, a)) in traj.states.iter().zip(&traj.actions).enumerate() {
        let line = StepLine {
            t,
            s: s.clone(),
            a: a.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("step")).unwrap();
    }
    writeln!(out, "{}", json!({ "success": traj.success })).unwrap();
    out
}

pub fn decode_trajectory(text: &str) -> std::result::Result<Trajectory, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or("empty file")?;
    let header: Header = serde_json::from_str(first).map_err(|e| format!("line 1: {e}"))?;
    if header.format_version != DATASET_VERSION {
        return Err(format!(
            "unsupported format version {} (expected {DATASET_VERSION})",
            header.format_version
        ));
    }
    let sd = state_dim(header.j_max);
    let mut traj = Trajectory {
        task: header.task,
        seed: header.seed,
        j_max: header.j_max,
        dt: header.dt,
        states: Vec::new(),
        actions: Vec::new(),
        success: false,
    };
    let mut done = false;
    for (n, line) in lines {
        if done {
            return Err(format!("line {}: data after the success line", n + 1));
        }
        let v: Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        if let Some(ok) = v.get("success") {
            traj.success = ok
                .as_bool()
                .ok_or(format!("line {}: success must be a bool", n + 1))?;
            done = true;
            continue;
        }
        let step: StepLine =
            serde_json::from_value(v).map_err(|e| format!("line {}: {e}", n + 1))?;
        if step.t != traj.states.len() {
            return Err(format!(
                "line {}: expected t={}, found {}",
                n + 1,
                traj.states.len(),
                step.t
            ));
        }
        if step.s.len() != sd || step.a.len() != ACTION_DIM {
            return Err(format!(
                "line {}: state/action lengths {}/{} (expected {sd}/{ACTION_DIM})",
                n + 1,
                step.s.len(),
                step.a.len()
            ));
        }
        check_row(&step.s, &step.a, header.j_max).map_err(|m| format!("line {}: {m}", n + 1))?;
        traj.states.push(step.s);
        traj.actions.push(step.a);
    }
    if !done {
        return Err("missing final success line (truncated file?)".into());
    }
    if traj.states.is_empty() {
        return Err("trajectory has no steps".into());
    }
    Ok(traj)
}

fn check_row(s: &[f64], a: &[f64], j_max: usize) -> std::result::Result<(), String> {
    let unit = |v: &[f64]| (Quat([v[0], v[1], v[2], v[3]]).norm() - 1.0).abs() <= UNIT_TOL;
    if s.iter().chain(a).any(|v| !v.is_finite()) {
        return Err("non-finite value".into());
    }
    if !unit(&s[3..7]) || !unit(&a[3..7]) {
        return Err("quaternion is not unit-norm".into());
    }
    for j in 0..j_max {
        let o = &s[8 + POSE_DIM * j..8 + POSE_DIM * (j + 1)];
        if o.iter().any(|v| *v != 0.0) && !unit(&o[3..7]) {
            return Err(format!("object slot {j} quaternion is not unit-norm"));
        }
    }
    if !(0.0..=1.0).contains(&s[7]) || !(0.0..=1.0).contains(&a[7]) {
        return Err("gripper value outside [0,1]".into());
    }
    Ok(())
}

pub fn save_trajectory(path: &Path, traj: &Trajectory, config: Option<&Value>) -> Result<()> {
    write_atomic(path, encode_trajectory(traj, config).as_bytes())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    decode_trajectory(&text).map_err(|m| Error::file(path, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(rename = "J_max")]
    pub j_max: usize,
    pub seed: u64,
    /// File names relative to the manifest directory.
    pub files: Vec<String>,
    pub counts: BTreeMap<TaskId, usize>,
    pub generator_config_hash: String,
    pub config: GenConfig,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Demonstration seeds for `task` under a dataset seed, in attempt order.
pub fn demo_seeds(task: TaskId, seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + task as u64);
    (0..count).map(|_| rng.next_u64() >> 11).collect()
}

/// Writes `n` successful expert demonstrations per task and the manifest.
pub fn generate_dataset(
    out: &Path,
    tasks: &[(TaskId, usize)],
    seed: u64,
    cfg: &GenConfig,
) -> Result<DatasetManifest> {
    let mut files = Vec::new();
    let mut counts = BTreeMap::new();
    let config_value = serde_json::to_value(cfg)?;
    for &(id, n) in tasks {
        if n == 0 {
            return Err(Error::InvalidInput(format!(
                "{id}: need at least one demonstration"
            )));
        }
        let task = cfg.tasks.get(id)?;
        task.validate(cfg.j_max)?;
        let cap = 10 * n;
        let mut made = 0;
        let mut failures = Vec::new();
        for s in demo_seeds(id, seed, cap) {
            if made == n {
                break;
            }
            let traj = match record_expert(task, s, cfg) {
                Ok(t) if t.success => t,
                Ok(t) => {
                    failures.push(format!("seed {s}: no success within {} steps", t.len()));
                    continue;
                }
                Err(e) => {
                    failures.push(format!("seed {s}: {e}"));
                    continue;
                }
            };
            let name = format!("{id}_{made:04}.jsonl");
            save_trajectory(&out.join(&name), &traj, Some(&config_value))?;
            files.push(name);
            made += 1;
        }
        if made < n {
            return Err(Error::Generation(format!(
                "{id}: only {made}/{n} successful demonstrations after {cap} attempts; first failures: {}",
                failures.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
            )));
        }
        *counts.entry(id).or_insert(0) += n;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        j_max: cfg.j_max,
        seed,
        files,
        counts,
        generator_config_hash: cfg.hash(),
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub trajectories: Vec<Trajectory>,
}

/// Loads and validates a dataset. `path` is the manifest file or its directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::file(&manifest_path, e))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Error::file(&manifest_path, e))?;
    if let Some(v) = raw.get("format_version").and_then(Value::as_u64) {
        if v != DATASET_VERSION as u64 {
            return Err(Error::Version {
                found: v as u32,
                expected: DATASET_VERSION,
            });
        }
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| Error::file(&manifest_path, e))?;
    if manifest.config.j_max != manifest.j_max {
        return Err(Error::file(
            &manifest_path,
            "J_max disagrees with the embedded config",
        ));
    }
    if manifest.counts.values().sum::<usize>() != manifest.files.len() {
        return Err(Error::file(
            &manifest_path,
            "per-task counts do not match the file list",
        ));
    }
    let mut trajectories = Vec::with_capacity(manifest.files.len());
    let mut per_task: BTreeMap<TaskId, usize> = BTreeMap::new();
    for f in &manifest.files {
        let p = root.join(f);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
        let traj = match decode_trajectory(&text) {
            Ok(t) => t,
            Err(m) if m.starts_with("unsupported format version") => {
                let found = serde_json::from_str::<Value>(text.lines().next().unwrap_or(""))
                    .ok()
                    .and_then(|h| h.get("format_version").and_then(Value::as_u64))
                    .unwrap_or(0);
                return Err(Error::Version {
                    found: found as u32,
                    expected: DATASET_VERSION,
                });
            }
            Err(m) => return Err(Error::file(&p, m)),
        };
        if traj.j_max != manifest.j_max {
            return Err(Error::file(
                &p,
                format!("J_max {} differs from the manifest", traj.j_max),
            ));
        }
        *per_task.entry(traj.task).or_insert(0) += 1;
        trajectories.push(traj);
    }
    if per_task != manifest.counts {
        return Err(Error::file(
            &manifest_path,
            "per-task counts do not match the trajectories",
        ));
    }
    // Replay a deterministic 5% sample (at least one).
    let n = trajectories.len();
    if n > 0 {
        let k = n.div_ceil(20);
        let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
        for i in sample(&mut rng, n, k) {
            replay(&trajectories[i], &manifest.config)
                .map_err(|e| Error::file(root.join(&manifest.files[i]), e))?;
        }
    }
    Ok(Dataset {
        manifest,
        root,
        trajectories,
    })
}
