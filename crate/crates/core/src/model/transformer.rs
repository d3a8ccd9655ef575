//! The trajectory auto-complete transformer.
//!
//! Each slot's state and action are embedded by separate affine maps, the
//! learned embedding of the slot's path-length token is added to both, and
//! the two halves are concatenated and layer-normalized. Masked (future)
//! slots enter as exact zeros. A pre-norm transformer trunk follows, and two
//! affine heads read every output row back into state and action space.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::types::{
    object_col, ActionVector, AttentionMode, ModelConfig, StateVector, Window, ACTION_DIM,
    ACTION_GRIPPER_COL, POSE_DIM, STATE_GRIPPER_COL,
};
use crate::autodiff::{
    load_checkpoint, save_checkpoint, sigmoid, AttnMask, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    state_w: ParamId,
    state_b: ParamId,
    action_w: ParamId,
    action_b: ParamId,
    pos: ParamId,
    in_g: ParamId,
    in_b: ParamId,
    layers: Vec<LayerIds>,
    out_g: ParamId,
    out_b: ParamId,
    head_state_w: ParamId,
    head_state_b: ParamId,
    head_action_w: ParamId,
    head_action_b: ParamId,
}

/// Expected parameter names and shapes for a configuration, in registration order.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, e, s, ff) = (
        cfg.d_model,
        cfg.d_emb,
        cfg.state_dim(),
        cfg.d_model * cfg.ff_mult,
    );
    let mut out = vec![
        ("embed.state.weight".into(), vec![s, e]),
        ("embed.state.bias".into(), vec![e]),
        ("embed.action.weight".into(), vec![ACTION_DIM, e]),
        ("embed.action.bias".into(), vec![e]),
        ("embed.position".into(), vec![cfg.vocab_max, e]),
        ("embed.ln.gain".into(), vec![d]),
        ("embed.ln.bias".into(), vec![d]),
    ];
    for l in 0..cfg.layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.q.weight"), vec![d, d]),
            (p("attn.q.bias"), vec![d]),
            (p("attn.k.weight"), vec![d, d]),
            (p("attn.k.bias"), vec![d]),
            (p("attn.v.weight"), vec![d, d]),
            (p("attn.v.bias"), vec![d]),
            (p("attn.out.weight"), vec![d, d]),
            (p("attn.out.bias"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("ff.in.weight"), vec![d, ff]),
            (p("ff.in.bias"), vec![ff]),
            (p("ff.out.weight"), vec![ff, d]),
            (p("ff.out.bias"), vec![d]),
        ]);
    }
    out.extend([
        ("final_ln.gain".into(), vec![d]),
        ("final_ln.bias".into(), vec![d]),
        ("head.state.weight".into(), vec![d, s]),
        ("head.state.bias".into(), vec![s]),
        ("head.action.weight".into(), vec![d, ACTION_DIM]),
        ("head.action.bias".into(), vec![ACTION_DIM]),
    ]);
    out
}

/// Raw head outputs for a batch of windows, `[batch·seq_len, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub states: Var,
    pub actions: Var,
}

/// Decoded predictions for every slot of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub states: Vec<StateVector>,
    pub actions: Vec<ActionVector>,
    /// Raw head rows (gripper columns are logits).
    pub raw_states: Tensor,
    pub raw_actions: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

impl TrajectoryModel {
    /// Freshly initialized model (normal(0, 0.02) weights, unit LN gains, zero biases).
    pub fn new(config: ModelConfig, seed: u64) -> Result<TrajectoryModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = INIT_STD / (2.0 * config.layers as f64).sqrt();
        let mut params = ParamStore::new();
        for (name, shape) in param_layout(&config) {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with("bias") {
                Tensor::zeros(&shape)
            } else {
                let std = if name.ends_with("attn.out.weight") || name.ends_with("ff.out.weight") {
                    resid_std
                } else {
                    INIT_STD
                };
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                Tensor::new(shape, data)?
            };
            params.add(name, t)?;
        }
        TrajectoryModel::from_params(config, params)
    }

    /// Every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<TrajectoryModel> {
        let mut m = TrajectoryModel::new(config, 0)?;
        m.params.zero_all();
        Ok(m)
    }

    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<TrajectoryModel> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters for this config, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load_params",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let layers = (0..config.layers)
            .map(|l| {
                let p = |n: &str| id(&format!("layers.{l}.{n}"));
                LayerIds {
                    ln1_g: p("ln1.gain"),
                    ln1_b: p("ln1.bias"),
                    wq: p("attn.q.weight"),
                    bq: p("attn.q.bias"),
                    wk: p("attn.k.weight"),
                    bk: p("attn.k.bias"),
                    wv: p("attn.v.weight"),
                    bv: p("attn.v.bias"),
                    wo: p("attn.out.weight"),
                    bo: p("attn.out.bias"),
                    ln2_g: p("ln2.gain"),
                    ln2_b: p("ln2.bias"),
                    w1: p("ff.in.weight"),
                    b1: p("ff.in.bias"),
                    w2: p("ff.out.weight"),
                    b2: p("ff.out.bias"),
                }
            })
            .collect();
        let ids = Ids {
            state_w: id("embed.state.weight"),
            state_b: id("embed.state.bias"),
            action_w: id("embed.action.weight"),
            action_b: id("embed.action.bias"),
            pos: id("embed.position"),
            in_g: id("embed.ln.gain"),
            in_b: id("embed.ln.bias"),
            layers,
            out_g: id("final_ln.gain"),
            out_b: id("final_ln.bias"),
            head_state_w: id("head.state.weight"),
            head_state_b: id("head.state.bias"),
            head_action_w: id("head.action.weight"),
            head_action_b: id("head.action.bias"),
        };
        Ok(TrajectoryModel {
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// State embedding `[N, state_dim] -> [N, d_emb]`.
    pub fn embed_state(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let t = g.value(states);
        if t.cols() != self.config.state_dim() {
            return Err(Error::Shape {
                op: "embed_state",
                lhs: t.shape().to_vec(),
                rhs: vec![self.config.state_dim()],
            });
        }
        self.linear(g, states, self.ids.state_w, self.ids.state_b)
    }

    /// Action embedding `[N, 8] -> [N, d_emb]`.
    pub fn embed_action(&self, g: &mut Graph, actions: Var) -> Result<Var> {
        let t = g.value(actions);
        if t.cols() != ACTION_DIM {
            return Err(Error::Shape {
                op: "embed_action",
                lhs: t.shape().to_vec(),
                rhs: vec![ACTION_DIM],
            });
        }
        self.linear(g, actions, self.ids.action_w, self.ids.action_b)
    }

    /// Learned positional embedding rows for `tokens`.
    pub fn embed_position(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let table = g.param(&self.params, self.ids.pos);
        g.embedding(table, tokens)
    }

    /// Trunk input rows for a batch of windows stacked along the row axis.
    /// Slots at or beyond each window's `T_p` are exact zeros.
    pub fn build_inputs(&self, g: &mut Graph, windows: &[Window]) -> Result<Var> {
        let seq = self.config.seq_len;
        let sd = self.config.state_dim();
        let n = windows.len() * seq;
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut states = Vec::with_capacity(n * sd);
        let mut actions = Vec::with_capacity(n * ACTION_DIM);
        let mut tokens = Vec::with_capacity(n);
        let mut keep = Vec::with_capacity(n);
        for w in windows {
            if w.seq_len() != seq || w.state_dim() != sd {
                return Err(Error::Shape {
                    op: "build_inputs",
                    lhs: vec![w.seq_len(), w.state_dim()],
                    rhs: vec![seq, sd],
                });
            }
            if let Some(bad) = w.tokens().iter().find(|t| **t >= self.config.vocab_max) {
                return Err(Error::InvalidInput(format!(
                    "positional token {bad} >= vocab_max {}",
                    self.config.vocab_max
                )));
            }
            states.extend_from_slice(w.states());
            actions.extend_from_slice(w.actions());
            tokens.extend_from_slice(w.tokens());
            keep.extend((0..seq).map(|t| if t < w.t_p() { 1.0 } else { 0.0 }));
        }
        let s = g.constant(Tensor::new(vec![n, sd], states)?);
        let a = g.constant(Tensor::new(vec![n, ACTION_DIM], actions)?);
        let s_emb = self.embed_state(g, s)?;
        let a_emb = self.embed_action(g, a)?;
        let n_emb = self.embed_position(g, &tokens)?;
        let s_sum = g.add(s_emb, n_emb)?;
        let a_sum = g.add(a_emb, n_emb)?;
        let x = g.concat(&[s_sum, a_sum], 1)?;
        let gain = g.param(&self.params, self.ids.in_g);
        let bias = g.param(&self.params, self.ids.in_b);
        let x = g.layer_norm(x, gain, bias)?;
        g.scale_rows(x, &keep)
    }

    fn mask(&self) -> AttnMask {
        match self.config.attention_mode {
            AttentionMode::Causal => AttnMask::Causal,
            AttentionMode::Bidirectional => AttnMask::Full,
        }
    }

    /// Transformer trunk over stacked windows; `rng` enables dropout.
    fn trunk(&self, g: &mut Graph, mut x: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let cfg = &self.config;
        let mask = self.mask();
        let p_drop = if rng.is_some() { cfg.dropout } else { 0.0 };
        for l in &self.ids.layers {
            let g1 = g.param(&self.params, l.ln1_g);
            let b1 = g.param(&self.params, l.ln1_b);
            let h = g.layer_norm(x, g1, b1)?;
            let q = self.linear(g, h, l.wq, l.bq)?;
            let k = self.linear(g, h, l.wk, l.bk)?;
            let v = self.linear(g, h, l.wv, l.bv)?;
            let a = g.attention(q, k, v, cfg.heads, cfg.seq_len, &mask)?;
            let mut a = self.linear(g, a, l.wo, l.bo)?;
            if let Some(r) = rng.as_deref_mut() {
                a = g.dropout(a, p_drop, r)?;
            }
            x = g.add(x, a)?;

            let g2 = g.param(&self.params, l.ln2_g);
            let b2 = g.param(&self.params, l.ln2_b);
            let h = g.layer_norm(x, g2, b2)?;
            let f = self.linear(g, h, l.w1, l.b1)?;
            let f = g.activation(f, cfg.activation)?;
            let mut f = self.linear(g, f, l.w2, l.b2)?;
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, p_drop, r)?;
            }
            x = g.add(x, f)?;
        }
        let gf = g.param(&self.params, self.ids.out_g);
        let bf = g.param(&self.params, self.ids.out_b);
        g.layer_norm(x, gf, bf)
    }

    /// Applies the two output heads to trunk rows `y` (`[N, d_model]`).
    pub fn decode_outputs(&self, g: &mut Graph, y: Var) -> Result<ModelOutput> {
        let states = self.linear(g, y, self.ids.head_state_w, self.ids.head_state_b)?;
        let actions = self.linear(g, y, self.ids.head_action_w, self.ids.head_action_b)?;
        Ok(ModelOutput { states, actions })
    }

    /// Full forward pass for a batch of windows.
    pub fn forward(
        &self,
        g: &mut Graph,
        windows: &[Window],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelOutput> {
        let x = self.build_inputs(g, windows)?;
        let y = self.trunk(g, x, dropout_rng)?;
        self.decode_outputs(g, y)
    }

    /// Inference on one window: decoded predictions for every slot.
    pub fn predict(&self, window: &Window) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, std::slice::from_ref(window), None)?;
        let raw_states = g.value(out.states).clone();
        let raw_actions = g.value(out.actions).clone();
        let j_max = self.config.j_max;
        let states = (0..raw_states.rows())
            .map(|r| decode_state_row(raw_states.row(r), j_max))
            .collect();
        let actions = (0..raw_actions.rows())
            .map(|r| decode_action_row(raw_actions.row(r)))
            .collect();
        Ok(Prediction {
            states,
            actions,
            raw_states,
            raw_actions,
        })
    }

    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        save_checkpoint(
            path,
            &self.params,
            serde_json::to_value(&self.config)?,
            meta,
        )
    }

    /// Loads a checkpoint; returns the model and the header's `meta` field.
    pub fn load(path: &Path) -> Result<(TrajectoryModel, Value)> {
        let (header, params) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(header.config)
            .map_err(|e| Error::file(path, format!("bad model config: {e}")))?;
        Ok((TrajectoryModel::from_params(config, params)?, header.meta))
    }
}

fn decode_pose(raw: &[f64]) -> Pose {
    Pose {
        p: [raw[0], raw[1], raw[2]],
        q: Quat([raw[3], raw[4], raw[5], raw[6]])
            .normalized()
            .canonical(),
    }
}

/// Decodes a raw state-head row: quaternions renormalized (zero → identity),
/// gripper logit squashed to `[0, 1]`. Every object slot is reported present.
pub fn decode_state_row(raw: &[f64], j_max: usize) -> StateVector {
    StateVector {
        ee: decode_pose(&raw[..POSE_DIM]),
        gripper: sigmoid(raw[STATE_GRIPPER_COL]),
        objects: (0..j_max)
            .map(|j| Some(decode_pose(&raw[object_col(j)..object_col(j) + POSE_DIM])))
            .collect(),
    }
}

pub fn decode_action_row(raw: &[f64]) -> ActionVector {
    ActionVector {
        target: decode_pose(&raw[..POSE_DIM]),
        gripper: sigmoid(raw[ACTION_GRIPPER_COL]),
    }
}
