use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::loss::{batch_loss, BatchTargets, LossParts, LossWeights};
use super::sampling::{sample_subsequence, sample_tp, Slice};
use crate::autodiff::{clip_global_norm, write_atomic, AdamConfig, AdamState, Graph};
use crate::demos::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::{BoxExtents, TokenScale, DEFAULT_BIN_SIZE};
use crate::model::{TrajectoryModel, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Largest sampled context length; at least `min_future` slots stay masked.
    pub t_p_max: usize,
    pub min_future: usize,
    pub seed: u64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub log_every: usize,
    /// Checkpoint period in steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    /// Half-extents of the box used by the corner losses and tokens.
    pub extents: [f64; 3],
    pub bin_size: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            steps: 10_000,
            lr_start: 1e-4,
            lr_end: 5e-5,
            t_p_max: 350,
            min_future: 50,
            seed: 0,
            grad_clip: 1.0,
            log_every: 10,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            extents: [0.05; 3],
            bin_size: DEFAULT_BIN_SIZE,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive".into());
        }
        if self.t_p_max == 0 || self.t_p_max + self.min_future > seq_len {
            return bad(format!(
                "t_p_max ({}) must be in [1, seq_len - min_future] = [1, {}]",
                self.t_p_max,
                seq_len.saturating_sub(self.min_future)
            ));
        }
        if !(self.lr_start > 0.0 && self.lr_end >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        BoxExtents::new(self.extents)?;
        self.token_scale(1).validate()?;
        self.loss.validate()
    }

    pub fn extents(&self) -> BoxExtents {
        BoxExtents::new(self.extents).expect("validated extents")
    }

    pub fn token_scale(&self, vocab_max: usize) -> TokenScale {
        TokenScale {
            bin_size: self.bin_size,
            vocab_max,
        }
    }

    /// Linear schedule from `lr_start` at step 0 to `lr_end` at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || step + 1 >= self.steps {
            return if self.steps <= 1 {
                self.lr_start
            } else {
                self.lr_end
            };
        }
        let f = step as f64 / (self.steps - 1) as f64;
        self.lr_start + (self.lr_end - self.lr_start) * f
    }
}

/// One batch: slices drawn from the dataset and the windows built from them.
pub struct Batch {
    pub slices: Vec<Slice>,
    pub windows: Vec<Window>,
}

impl Batch {
    pub fn targets(&self) -> BatchTargets<'_> {
        BatchTargets {
            slices: &self.slices,
            windows: &self.windows,
        }
    }
}

pub fn sample_batch(
    data: &[Trajectory],
    model: &TrajectoryModel,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mc = model.config();
    let extents = cfg.extents();
    let scale = cfg.token_scale(mc.vocab_max);
    let mut slices = Vec::with_capacity(cfg.batch_size);
    let mut windows = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let demo = &data[rng.random_range(0..data.len())];
        if demo.j_max != mc.j_max {
            return Err(Error::InvalidInput(format!(
                "demo J_max {} does not match the model's {}",
                demo.j_max, mc.j_max
            )));
        }
        let s = sample_subsequence(demo, mc.seq_len, &extents, &scale, rng)?;
        let t_p = sample_tp(rng, cfg.t_p_max);
        windows.push(s.window(t_p)?);
        slices.push(s);
    }
    Ok(Batch { slices, windows })
}

/// Loss of `model` on `batch` without dropout or gradient.
pub fn evaluate_loss(
    model: &TrajectoryModel,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.windows, None)?;
    let lv = batch_loss(
        &mut g,
        &out,
        &batch.targets(),
        model.config().j_max,
        &cfg.extents(),
        &cfg.loss,
    )?;
    Ok(lv.values(&g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub parts: LossParts,
}

pub const CURVE_HEADER: &str = "step,lr,total,s_r,a_r,s_obj,s_g,a_g";

pub fn curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in records {
        let p = &r.parts;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.lr, p.total, p.s_r, p.a_r, p.s_obj, p.s_g, p.a_g
        )
        .unwrap();
    }
    out
}

/// Where a run writes its outputs; `meta` is merged into the checkpoint header.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub curve: Option<&'a Path>,
    pub meta: Value,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Every `log_every`-th step plus the last one.
    pub curve: Vec<LossRecord>,
    /// Every step.
    pub all: Vec<LossRecord>,
}

fn checkpoint_meta(cfg: &TrainConfig, step: usize, extra: &Value) -> Value {
    json!({ "train": cfg, "seed": cfg.seed, "step": step, "run": extra })
}

/// Adam training with a linear learning-rate schedule. A non-finite loss or
/// gradient stops the run with [`Error::Diverged`]; checkpoints already
/// written are left in place.
pub fn train_loop(
    data: &[Trajectory],
    model: &mut TrajectoryModel,
    cfg: &TrainConfig,
    outputs: &TrainOutputs<'_>,
) -> Result<TrainReport> {
    cfg.validate(model.config().seq_len)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);
    let dropout = model.config().dropout > 0.0;
    let mut adam = AdamState::new(model.params(), cfg.adam);
    let mut all = Vec::with_capacity(cfg.steps);
    let mut curve = Vec::new();
    let extents = cfg.extents();
    let j_max = model.config().j_max;

    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let batch = sample_batch(data, model, cfg, &mut rng)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.windows, dropout.then_some(&mut drop_rng))?;
        let lv = batch_loss(&mut g, &out, &batch.targets(), j_max, &extents, &cfg.loss)?;
        let parts = lv.values(&g);
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("loss is {}", parts.total),
            });
        }
        let grads = g.backward(lv.total)?;
        let mut buf = model.params().zero_grads();
        grads.accumulate_params(&g, &mut buf);
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut buf, cfg.grad_clip);
        }
        adam.step(model.params_mut(), &buf, lr)
            .map_err(|e| Error::Diverged {
                step,
                msg: e.to_string(),
            })?;

        let rec = LossRecord { step, lr, parts };
        all.push(rec);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step} lr {lr:.3e} loss {:.4} (s_r {:.4} a_r {:.4} obj {:.4} grip {:.4}/{:.4})",
                parts.total, parts.s_r, parts.a_r, parts.s_obj, parts.s_g, parts.a_g
            );
            curve.push(rec);
        }
        let periodic = cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0;
        if let (Some(path), true) = (outputs.checkpoint, periodic && step + 1 < cfg.steps) {
            model.save(path, checkpoint_meta(cfg, step + 1, &outputs.meta))?;
        }
    }
    if let Some(path) = outputs.checkpoint {
        model.save(path, checkpoint_meta(cfg, cfg.steps, &outputs.meta))?;
    }
    if let Some(path) = outputs.curve {
        write_atomic(path, curve_csv(&curve).as_bytes())?;
    }
    Ok(TrainReport { curve, all })
}
