use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat};

/// Numbers per pose: position then scalar-first quaternion.
pub const POSE_DIM: usize = 7;
pub const ACTION_DIM: usize = POSE_DIM + 1;

/// Column offset of the gripper value inside a state row.
pub const STATE_GRIPPER_COL: usize = POSE_DIM;
pub const ACTION_GRIPPER_COL: usize = POSE_DIM;

pub fn state_dim(j_max: usize) -> usize {
    8 + POSE_DIM * j_max
}

/// Column offset of object slot `j` inside a state row.
pub fn object_col(j: usize) -> usize {
    8 + POSE_DIM * j
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_emb: usize,
    /// Context length T_s.
    pub seq_len: usize,
    pub j_max: usize,
    pub vocab_max: usize,
    pub attention_mode: AttentionMode,
    pub dropout: f64,
    pub activation: Activation,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            heads: 8,
            d_model: 256,
            d_emb: 128,
            seq_len: 400,
            j_max: 2,
            vocab_max: crate::geometry::DEFAULT_VOCAB_MAX,
            attention_mode: AttentionMode::Causal,
            dropout: 0.1,
            activation: Activation::Gelu,
            ff_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model != 2 * self.d_emb {
            return bad(format!(
                "d_model ({}) must equal 2 * d_emb ({})",
                self.d_model, self.d_emb
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 || self.seq_len == 0 || self.vocab_max == 0 || self.ff_mult == 0 {
            return bad("layers, seq_len, vocab_max and ff_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        state_dim(self.j_max)
    }
}

/// Per-timestep observation: end-effector pose, gripper opening and the
/// poses of up to `J_max` objects expressed in the end-effector frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub ee: Pose,
    /// Opening fraction, 1 = fully open.
    pub gripper: f64,
    /// `None` marks an absent slot; absent slots serialize as zeros.
    pub objects: Vec<Option<Pose>>,
}

impl StateVector {
    pub fn j_max(&self) -> usize {
        self.objects.len()
    }

    pub fn present(&self) -> Vec<bool> {
        self.objects.iter().map(Option::is_some).collect()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(state_dim(self.objects.len()));
        v.extend_from_slice(&self.ee.to_array());
        v.push(self.gripper);
        for o in &self.objects {
            match o {
                Some(p) => v.extend_from_slice(&p.to_array()),
                None => v.extend_from_slice(&[0.0; POSE_DIM]),
            }
        }
        v
    }

    /// Reads a raw row; an all-zero object slot is treated as absent.
    pub fn from_slice(v: &[f64], j_max: usize) -> Result<StateVector> {
        if v.len() != state_dim(j_max) {
            return Err(Error::Shape {
                op: "state_vector",
                lhs: vec![v.len()],
                rhs: vec![state_dim(j_max)],
            });
        }
        let objects = (0..j_max)
            .map(|j| {
                let s = &v[object_col(j)..object_col(j) + POSE_DIM];
                if s.iter().all(|x| *x == 0.0) {
                    None
                } else {
                    Some(Pose::from_slice(s))
                }
            })
            .collect();
        Ok(StateVector {
            ee: Pose::from_slice(&v[..POSE_DIM]),
            gripper: v[STATE_GRIPPER_COL],
            objects,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |q: &Quat| (q.norm() - 1.0).abs() <= crate::geometry::UNIT_TOL;
        if !unit(&self.ee.q) || self.objects.iter().flatten().any(|p| !unit(&p.q)) {
            return Err(Error::InvalidInput(
                "state quaternion is not unit-norm".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gripper) {
            return Err(Error::InvalidInput(format!(
                "gripper opening {} outside [0,1]",
                self.gripper
            )));
        }
        Ok(())
    }
}

/// Target end-effector pose in the current end-effector frame plus a gripper
/// command (1 = close).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub target: Pose,
    pub gripper: f64,
}

impl ActionVector {
    /// Stay in place with the gripper open.
    pub const HOLD: ActionVector = ActionVector {
        target: Pose::IDENTITY,
        gripper: 0.0,
    };

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.target.to_array().to_vec();
        v.push(self.gripper);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<ActionVector> {
        if v.len() != ACTION_DIM {
            return Err(Error::Shape {
                op: "action_vector",
                lhs: vec![v.len()],
                rhs: vec![ACTION_DIM],
            });
        }
        Ok(ActionVector {
            target: Pose::from_slice(&v[..POSE_DIM]),
            gripper: v[ACTION_GRIPPER_COL],
        })
    }

    pub fn closes(&self) -> bool {
        self.gripper >= 0.5
    }
}

/// Model context: `seq_len` slots of which the first `t_p` hold real data.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    seq_len: usize,
    state_dim: usize,
    t_p: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    tokens: Vec<usize>,
}

impl Window {
    /// Builds a window from the first `t_p` rows of `states`/`actions`/`tokens`;
    /// anything beyond `t_p` is ignored and left zero.
    pub fn from_rows(
        seq_len: usize,
        t_p: usize,
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
        tokens: &[usize],
    ) -> Result<Window> {
        if t_p == 0 || t_p > seq_len {
            return Err(Error::InvalidInput(format!(
                "T_p = {t_p} outside [1, {seq_len}]"
            )));
        }
        if states.len() < t_p || actions.len() < t_p || tokens.len() < t_p {
            return Err(Error::InvalidInput(format!(
                "window needs {t_p} real rows, got {}/{}/{}",
                states.len(),
                actions.len(),
                tokens.len()
            )));
        }
        let sd = states[0].len();
        let mut s = vec![0.0; seq_len * sd];
        let mut a = vec![0.0; seq_len * ACTION_DIM];
        let mut n = vec![0usize; seq_len];
        for t in 0..t_p {
            if states[t].len() != sd || actions[t].len() != ACTION_DIM {
                return Err(Error::Shape {
                    op: "window",
                    lhs: vec![states[t].len(), actions[t].len()],
                    rhs: vec![sd, ACTION_DIM],
                });
            }
            s[t * sd..(t + 1) * sd].copy_from_slice(&states[t]);
            a[t * ACTION_DIM..(t + 1) * ACTION_DIM].copy_from_slice(&actions[t]);
            n[t] = tokens[t];
        }
        if n[..t_p].windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput(
                "positional tokens must be non-decreasing".into(),
            ));
        }
        Ok(Window {
            seq_len,
            state_dim: sd,
            t_p,
            states: s,
            actions: a,
            tokens: n,
        })
    }

    pub fn from_vectors(
        seq_len: usize,
        states: &[StateVector],
        actions: &[ActionVector],
        tokens: &[usize],
    ) -> Result<Window> {
        let s: Vec<Vec<f64>> = states.iter().map(StateVector::to_vec).collect();
        let a: Vec<Vec<f64>> = actions.iter().map(ActionVector::to_vec).collect();
        Window::from_rows(seq_len, states.len(), &s, &a, tokens)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn t_p(&self) -> usize {
        self.t_p
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn state_row(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action_row(&self, t: usize) -> &[f64] {
        &self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Mutable access for perturbation tests; callers keep masked slots meaningful.
    pub fn state_row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action_row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }

    pub fn tokens_mut(&mut self) -> &mut [usize] {
        &mut self.tokens
    }
}
