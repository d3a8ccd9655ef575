use serde::{Deserialize, Serialize};

use super::sampling::Slice;
use crate::autodiff::{bce_with_logit, Graph, PoseTargets, Var};
use crate::error::{Error, Result};
use crate::geometry::{corner_distance, BoxExtents, Pose};
use crate::model::{
    object_col, ModelOutput, Window, ACTION_GRIPPER_COL, POSE_DIM, STATE_GRIPPER_COL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the two gripper terms.
    pub lambda_gripper: f64,
    /// Include the object-pose terms in the total.
    pub object_loss_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gripper: 1.0,
            object_loss_enabled: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gripper >= 0.0 && self.lambda_gripper.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_gripper must be >= 0, got {}",
                self.lambda_gripper
            )));
        }
        Ok(())
    }
}

/// Loss values. `s_obj` is always measured, even when excluded from `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub s_r: f64,
    pub a_r: f64,
    pub s_obj: f64,
    pub s_g: f64,
    pub a_g: f64,
}

/// Graph nodes of each loss component.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub s_r: Var,
    pub a_r: Var,
    pub s_obj: Option<Var>,
    pub s_g: Var,
    pub a_g: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossParts {
        LossParts {
            total: g.value(self.total).item(),
            s_r: g.value(self.s_r).item(),
            a_r: g.value(self.a_r).item(),
            s_obj: self.s_obj.map_or(0.0, |v| g.value(v).item()),
            s_g: g.value(self.s_g).item(),
            a_g: g.value(self.a_g).item(),
        }
    }
}

/// Sum of `corner_distance` over rows `t` in `range` (naive reference form).
pub fn corner_pose_loss(
    pred: &[Pose],
    truth: &[Pose],
    extents: &BoxExtents,
    range: std::ops::Range<usize>,
) -> f64 {
    range
        .map(|t| corner_distance(&pred[t], &truth[t], extents))
        .sum()
}

/// Sum of BCE between `sigmoid(logit)` and targets over `range`.
pub fn gripper_bce_loss(
    logits: &[f64],
    targets: &[f64],
    range: std::ops::Range<usize>,
) -> Result<f64> {
    let mut total = 0.0;
    for t in range {
        let y = targets[t];
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::InvalidInput(format!("BCE target {y} outside [0,1]")));
        }
        total += bce_with_logit(logits[t], y);
    }
    Ok(total)
}

/// Weighted sum of the components.
pub fn total_loss(p: &LossParts, w: &LossWeights) -> f64 {
    let obj = if w.object_loss_enabled { p.s_obj } else { 0.0 };
    p.s_r + p.a_r + obj + w.lambda_gripper * (p.s_g + p.a_g)
}

/// Training targets for a batch: the windows' slices and visible lengths.
pub struct BatchTargets<'a> {
    pub slices: &'a [Slice],
    pub windows: &'a [Window],
}

fn pose7(row: &[f64], col: usize) -> [f64; 7] {
    let mut out = [0.0; 7];
    out.copy_from_slice(&row[col..col + POSE_DIM]);
    out
}

/// Loss over masked, non-padded rows: summed over time, averaged over the batch.
pub fn batch_loss(
    g: &mut Graph,
    out: &ModelOutput,
    batch: &BatchTargets<'_>,
    j_max: usize,
    extents: &BoxExtents,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let b = batch.slices.len();
    if b == 0 || batch.windows.len() != b {
        return Err(Error::InvalidInput(
            "loss needs one window per slice".into(),
        ));
    }
    let seq = batch.slices[0].states.len();
    let rows = b * seq;
    let inv_b = 1.0 / b as f64;
    let mut mask = Vec::with_capacity(rows);
    for (s, w) in batch.slices.iter().zip(batch.windows) {
        for t in 0..seq {
            mask.push(if t >= w.t_p() && s.valid[t] {
                inv_b
            } else {
                0.0
            });
        }
    }
    let all_rows = || {
        batch
            .slices
            .iter()
            .flat_map(|s| (0..seq).map(move |t| (s, t)))
    };

    let ee_targets: Vec<[f64; 7]> = all_rows().map(|(s, t)| pose7(&s.states[t], 0)).collect();
    let act_targets: Vec<[f64; 7]> = all_rows().map(|(s, t)| pose7(&s.actions[t], 0)).collect();
    let sg: Vec<f64> = all_rows()
        .map(|(s, t)| s.states[t][STATE_GRIPPER_COL])
        .collect();
    let ag: Vec<f64> = all_rows()
        .map(|(s, t)| s.actions[t][ACTION_GRIPPER_COL])
        .collect();

    let ps = g.slice_cols(out.states, 0, POSE_DIM)?;
    let s_r = g.corner_loss(
        ps,
        PoseTargets {
            poses: ee_targets,
            weights: mask.clone(),
            extents: *extents,
        },
    )?;
    let pa = g.slice_cols(out.actions, 0, POSE_DIM)?;
    let a_r = g.corner_loss(
        pa,
        PoseTargets {
            poses: act_targets,
            weights: mask.clone(),
            extents: *extents,
        },
    )?;
    let mut s_obj: Option<Var> = None;
    for j in 0..j_max {
        let c = object_col(j);
        let targets: Vec<[f64; 7]> = all_rows().map(|(s, t)| pose7(&s.states[t], c)).collect();
        // Absent slots are stored as zeros and never scored.
        let w: Vec<f64> = targets
            .iter()
            .zip(&mask)
            .map(|(p, m)| if p.iter().any(|v| *v != 0.0) { *m } else { 0.0 })
            .collect();
        let po = g.slice_cols(out.states, c, c + POSE_DIM)?;
        let l = g.corner_loss(
            po,
            PoseTargets {
                poses: targets,
                weights: w,
                extents: *extents,
            },
        )?;
        s_obj = Some(match s_obj {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let lg = g.slice_cols(out.states, STATE_GRIPPER_COL, STATE_GRIPPER_COL + 1)?;
    let s_g = g.bce_logits(lg, &sg, &mask)?;
    let la = g.slice_cols(out.actions, ACTION_GRIPPER_COL, ACTION_GRIPPER_COL + 1)?;
    let a_g = g.bce_logits(la, &ag, &mask)?;

    let pose = g.add(s_r, a_r)?;
    let pose = match (s_obj, weights.object_loss_enabled) {
        (Some(o), true) => g.add(pose, o)?,
        _ => pose,
    };
    let grip = g.add(s_g, a_g)?;
    let grip = g.scale(grip, weights.lambda_gripper)?;
    let total = g.add(pose, grip)?;
    Ok(LossVars {
        total,
        s_r,
        a_r,
        s_obj,
        s_g,
        a_g,
    })
}
