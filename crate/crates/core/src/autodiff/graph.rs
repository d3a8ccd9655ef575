//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape from the loss node toward the leaves. Nodes are appended
//! only after their inputs, so tape order is a topological order.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{BoxExtents, Quat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Key visibility for attention. `visible(i, j)` answers whether query `i` may read key `j`.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    Causal,
    Full,
    Custom { len: usize, visible: Vec<bool> },
}

impl AttnMask {
    #[inline]
    pub fn visible(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Causal => j <= i,
            AttnMask::Full => true,
            AttnMask::Custom { len, visible } => visible[i * len + j],
        }
    }
}

/// Fixed per-row targets for a corner loss.
#[derive(Debug, Clone)]
pub struct PoseTargets {
    pub poses: Vec<[f64; 7]>,
    pub weights: Vec<f64>,
    pub extents: BoxExtents,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<f64>,
    },
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    CornerLoss {
        pred: Var,
        targets: PoseTargets,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `c[m×n] (+)= alpha · a[m×k] · b[k×n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

const GELU_K: f64 = 0.044715;

#[inline]
fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_K * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x,0) − x·y + ln(1 + e^{−|x|})`, the logit form of binary cross entropy.
#[inline]
pub fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf that tracks its gradient (used for gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            k,
            1,
            tb.data(),
            n,
            1,
            0.0,
            &mut out,
            n,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("add", t, Op::Add(a, b), ng)
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(shape_err("add_row", tx, tb));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        self.push("add_row", t, Op::AddRow(x, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v * s).collect(),
        )?;
        let ng = self.ng(x);
        self.push("scale", t, Op::Scale(x, s), ng)
    }

    /// Concatenation of 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(
            *inputs
                .first()
                .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?,
        );
        let (rows, _) = (first.rows(), first.cols());
        let t = match axis {
            0 => {
                let c = first.cols();
                let mut data = Vec::new();
                let mut r = 0;
                for v in inputs {
                    let t = self.value(*v);
                    if t.cols() != c {
                        return Err(shape_err("concat", first, t));
                    }
                    r += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![r, c], data)?
            }
            1 => {
                let mut total = 0;
                for v in inputs {
                    let t = self.value(*v);
                    if t.rows() != rows {
                        return Err(shape_err("concat", first, t));
                    }
                    total += t.cols();
                }
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for v in inputs {
                        data.extend_from_slice(self.value(*v).row(r));
                    }
                }
                Tensor::new(vec![rows, total], data)?
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "concat axis {axis} unsupported"
                )))
            }
        };
        let ng = inputs.iter().any(|v| self.ng(*v));
        self.push(
            "concat",
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.cols() {
            return Err(Error::InvalidInput(format!(
                "slice_cols {start}..{end} of {:?}",
                tx.shape()
            )));
        }
        let mut data = Vec::with_capacity(tx.rows() * (end - start));
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let t = Tensor::new(vec![tx.rows(), end - start], data)?;
        let ng = self.ng(x);
        self.push("slice_cols", t, Op::SliceCols { x, start }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.rows() {
            return Err(Error::InvalidInput(format!(
                "slice_rows {start}..{end} of {:?}",
                tx.shape()
            )));
        }
        let c = tx.cols();
        let t = Tensor::new(vec![end - start, c], tx.data()[start * c..end * c].to_vec())?;
        let ng = self.ng(x);
        self.push("slice_rows", t, Op::SliceRows { x, start }, ng)
    }

    /// Rows of `table` gathered in `indices` order.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(bad) = indices.iter().find(|i| **i >= v) {
            return Err(Error::InvalidInput(format!(
                "embedding index {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for i in indices {
            data.extend_from_slice(tt.row(*i));
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        let ng = self.ng(table);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Gelu => self.gelu(x),
            Activation::Relu => self.relu(x),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| gelu(*v)).collect(),
        )?;
        let ng = self.ng(x);
        self.push("gelu", t, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        let ng = self.ng(x);
        self.push("relu", t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| sigmoid(*v)).collect(),
        )?;
        let ng = self.ng(x);
        self.push("sigmoid", t, Op::Sigmoid(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.len() as f64;
        let ng = self.ng(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if c < 2 {
            return Err(Error::InvalidInput(format!(
                "layer_norm needs a last axis of length >= 2, got {:?}",
                tx.shape()
            )));
        }
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * c];
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]`; rows are grouped into sequences of
    /// length `seq` and columns into `heads` equal slices.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        mask: &AttnMask,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        let (n, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 || seq == 0 || n % seq != 0 {
            return Err(Error::InvalidInput(format!(
                "attention: {n}x{d} not divisible into {heads} heads / sequences of {seq}"
            )));
        }
        if let AttnMask::Custom { len, visible } = mask {
            if *len != seq || visible.len() != seq * seq {
                return Err(Error::InvalidInput("attention mask size mismatch".into()));
            }
        }
        for i in 0..seq {
            if !(0..seq).any(|j| mask.visible(i, j)) {
                return Err(Error::NoVisibleKey { row: i });
            }
        }
        let batch = n / seq;
        let dh = d / heads;
        let sc = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    sc,
                    &tq.data()[off..],
                    d,
                    1,
                    &tk.data()[off..],
                    1,
                    d,
                    0.0,
                    p,
                    seq,
                    1,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in row.iter().enumerate() {
                        if mask.visible(i, j) && *s > mx {
                            mx = *s;
                        }
                    }
                    let mut z = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        if mask.visible(i, j) {
                            *s = (*s - mx).exp();
                            z += *s;
                        } else {
                            *s = 0.0;
                        }
                    }
                    for s in row.iter_mut() {
                        *s /= z;
                    }
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    1.0,
                    p,
                    seq,
                    1,
                    &tv.data()[off..],
                    d,
                    1,
                    0.0,
                    &mut out[off..],
                    d,
                    1,
                );
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            "attention",
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            ng,
        )
    }

    /// Multiplies row `r` by `factors[r]`. With 0/1 factors this zeroes masked rows.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if factors.len() != tx.rows() {
            return Err(Error::InvalidInput(format!(
                "scale_rows: {} factors for {} rows",
                factors.len(),
                tx.rows()
            )));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for (row, f) in data.chunks_mut(c).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(
            "scale_rows",
            t,
            Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
            ng,
        )
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let tx = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let factors: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let c = tx.cols();
        let rows = tx.rows();
        // element-wise mask expressed as a constant multiply
        let m = self.constant(Tensor::new(vec![rows, c], factors)?);
        self.mul(x, m)
    }

    /// `Σ_r w_r Σ_k ‖c_k(pred_r) − c_k(target_r)‖` where `pred` rows are
    /// `[p(3), q(4)]` with an unnormalized quaternion.
    pub fn corner_loss(&mut self, pred: Var, targets: PoseTargets) -> Result<Var> {
        let tp = self.value(pred);
        if tp.cols() != 7 || targets.poses.len() != tp.rows() || targets.weights.len() != tp.rows()
        {
            return Err(Error::InvalidInput(format!(
                "corner_loss: pred {:?}, {} targets, {} weights",
                tp.shape(),
                targets.poses.len(),
                targets.weights.len()
            )));
        }
        let mut total = 0.0;
        for r in 0..tp.rows() {
            let w = targets.weights[r];
            if w == 0.0 {
                continue;
            }
            total += w * corner_row(tp.row(r), &targets.poses[r], &targets.extents, None);
        }
        let ng = self.ng(pred);
        self.push(
            "corner_loss",
            Tensor::scalar(total),
            Op::CornerLoss { pred, targets },
            ng,
        )
    }

    /// `Σ_r w_r · BCE(sigmoid(logit_r), target_r)` over a single-column `logits`.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != targets.len() || targets.len() != weights.len() {
            return Err(Error::InvalidInput("bce_logits: length mismatch".into()));
        }
        if let Some(bad) = targets.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::InvalidInput(format!(
                "BCE target {bad} outside [0,1]"
            )));
        }
        let total = tl
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|((x, y), w)| w * bce_with_logit(*x, *y))
            .sum();
        let ng = self.ng(logits);
        self.push(
            "bce_logits",
            Tensor::scalar(total),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, 1.0, g, n, 1, tb.data(), 1, n, 1.0, ga, k, 1);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, 1.0, ta.data(), 1, k, g, n, 1, 1.0, gb, n, 1);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let c = self.value(*x).cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * z;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * z;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::Concat { inputs, axis } => {
                let total = node.value.cols();
                let mut offset = 0;
                for v in inputs {
                    let t = self.value(*v);
                    let (r, c) = (t.rows(), t.cols());
                    if let Some(gv) = self.acc(grads, *v) {
                        if *axis == 0 {
                            let src = &g[offset * total..(offset + r) * total];
                            gv.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        } else {
                            for row in 0..r {
                                let src = &g[row * total + offset..row * total + offset + c];
                                gv[row * c..(row + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::SliceCols { x, start } => {
                let c_in = self.value(*x).cols();
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, row) in g.chunks(c).enumerate() {
                        gx[r * c_in + start..r * c_in + start + c]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Embedding { table, indices } => {
                let d = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, idx) in indices.iter().enumerate() {
                        gt[idx * d..(idx + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, b), xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *a += b * gelu_grad(*xv);
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, b), xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if *xv > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, b), s) in gx.iter_mut().zip(g).zip(y) {
                        *a += b * s * (1.0 - s);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gain_v = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (row, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for (r, (row, xh)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = row[j] * gain_v[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *seq, probs, g, grads),
            Op::ScaleRows { x, factors } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, f) in factors.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[r * c + j] * f;
                        }
                    }
                }
            }
            Op::CornerLoss { pred, targets } => {
                let tp = self.value(*pred);
                if let Some(gp) = self.acc(grads, *pred) {
                    for r in 0..tp.rows() {
                        let w = targets.weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let mut d = [0.0; 7];
                        corner_row(tp.row(r), &targets.poses[r], &targets.extents, Some(&mut d));
                        for j in 0..7 {
                            gp[r * 7 + j] += g[0] * w * d[j];
                        }
                    }
                }
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => {
                let tl = self.value(*logits);
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, x) in tl.data().iter().enumerate() {
                        gl[r] += g[0] * weights[r] * (sigmoid(*x) - targets[r]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (tq.rows(), tq.cols());
        let batch = n / seq;
        let dh = d / heads;
        let sc = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut ds = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dV = Pᵀ dO
                gemm(
                    seq,
                    seq,
                    dh,
                    1.0,
                    p,
                    1,
                    seq,
                    &g[off..],
                    d,
                    1,
                    1.0,
                    &mut dv[off..],
                    d,
                    1,
                );
                // dP = dO Vᵀ
                gemm(
                    seq,
                    dh,
                    seq,
                    1.0,
                    &g[off..],
                    d,
                    1,
                    &tv.data()[off..],
                    1,
                    d,
                    0.0,
                    &mut ds,
                    seq,
                    1,
                );
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut ds[i * seq..(i + 1) * seq];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot);
                    }
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    sc,
                    &ds,
                    seq,
                    1,
                    &tk.data()[off..],
                    d,
                    1,
                    1.0,
                    &mut dq[off..],
                    d,
                    1,
                );
                gemm(
                    seq,
                    seq,
                    dh,
                    sc,
                    &ds,
                    1,
                    seq,
                    &tq.data()[off..],
                    d,
                    1,
                    1.0,
                    &mut dk[off..],
                    d,
                    1,
                );
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                gv.iter_mut().zip(&src).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Corner distance of one raw pose row against a target; optionally writes
/// the gradient with respect to the raw `[p, q]` row into `grad`.
fn corner_row(
    raw: &[f64],
    target: &[f64; 7],
    extents: &BoxExtents,
    grad: Option<&mut [f64; 7]>,
) -> f64 {
    let qraw = [raw[3], raw[4], raw[5], raw[6]];
    let qn = Quat(qraw).norm();
    let (qhat, qn) = if qn < 1e-12 {
        (Quat::IDENTITY, 0.0)
    } else {
        (Quat(qraw.map(|v| v / qn)), qn)
    };
    let tq = Quat([target[3], target[4], target[5], target[6]]);
    let mut total = 0.0;
    let mut dp = [0.0; 3];
    let mut dqhat = [0.0; 4];
    let want_grad = grad.is_some();
    let (w, u) = (qhat.w(), qhat.vec());
    for k in 0..8 {
        let l = extents.local_corner(k);
        let rl = qhat.rotate_unchecked(l);
        let tl = tq.rotate_unchecked(l);
        // Grouped so that identical poses give exactly zero.
        let diff = [
            (raw[0] - target[0]) + (rl[0] - tl[0]),
            (raw[1] - target[1]) + (rl[1] - tl[1]),
            (raw[2] - target[2]) + (rl[2] - tl[2]),
        ];
        let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
        total += dist;
        if want_grad && dist > 1e-12 {
            let gc = [diff[0] / dist, diff[1] / dist, diff[2] / dist];
            for j in 0..3 {
                dp[j] += gc[j];
            }
            // v' = (w² − u·u) l + 2 (u·l) u + 2 w (u × l)
            use crate::geometry::{cross, dot};
            let gl = dot(gc, l);
            let ul = dot(u, l);
            let ug = dot(u, gc);
            let g_uxl = dot(gc, cross(u, l));
            dqhat[0] += 2.0 * w * gl + 2.0 * g_uxl;
            let lxg = cross(l, gc);
            for j in 0..3 {
                dqhat[j + 1] +=
                    -2.0 * u[j] * gl + 2.0 * l[j] * ug + 2.0 * ul * gc[j] + 2.0 * w * lxg[j];
            }
        }
    }
    if let Some(out) = grad {
        out[..3].copy_from_slice(&dp);
        if qn > 0.0 {
            let qh = qhat.0;
            let proj: f64 = (0..4).map(|j| qh[j] * dqhat[j]).sum();
            for j in 0..4 {
                out[3 + j] = (dqhat[j] - qh[j] * proj) / qn;
            }
        } else {
            out[3..].fill(0.0);
        }
    }
    total
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` is unreachable.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }

    /// Adds parameter gradients into `out`, indexed by [`ParamId`].
    pub fn accumulate_params(&self, graph: &Graph, out: &mut [Vec<f64>]) {
        for (id, var) in &graph.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.index()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        )
        .unwrap()
    }

    /// Central-difference check of `build` with respect to each of `inputs`.
    fn grad_check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eval = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.value(l).item()
        };
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(&g, vars[i]);
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[j];
                let err = (a - fd).abs();
                assert!(
                    err <= 1e-7 || err / a.abs().max(fd.abs()) <= 1e-4,
                    "input {i} coord {j}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn sigmoid_and_embedding() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).item(), 0.5);

        let table = g.constant(Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap());
        let e = g.embedding(table, &[3, 0]).unwrap();
        assert_eq!(g.value(e).data(), &[6.0, 7.0, 0.0, 1.0]);
        assert!(g.embedding(table, &[4]).is_err());
    }

    #[test]
    fn simple_gradients() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![1.0; 3]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let expect = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }

        let c = g.constant(Tensor::filled(&[1, 4], 3.0));
        let y = g.layer_norm(c, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let short = g.constant(Tensor::zeros(&[2, 1]));
        let one = g.constant(Tensor::filled(&[1], 1.0));
        let zero = g.constant(Tensor::zeros(&[1]));
        assert!(g.layer_norm(short, one, zero).is_err());
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(randn(&mut rng, &[5, 64]));
        let gain = g.constant(Tensor::filled(&[64], 1.0));
        let bias = g.constant(Tensor::zeros(&[64]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    fn naive_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        heads: usize,
        seq: usize,
        mask: &AttnMask,
    ) -> Vec<f64> {
        let (n, d) = (q.rows(), q.cols());
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        for b in 0..n / seq {
            for h in 0..heads {
                for i in 0..seq {
                    let mut scores = vec![f64::NEG_INFINITY; seq];
                    for j in 0..seq {
                        if mask.visible(i, j) {
                            let mut s = 0.0;
                            for c in 0..dh {
                                s += q.at(b * seq + i, h * dh + c) * k.at(b * seq + j, h * dh + c);
                            }
                            scores[j] = s / (dh as f64).sqrt();
                        }
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = w.iter().sum();
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..seq {
                            acc += w[j] / z * v.at(b * seq + j, h * dh + c);
                        }
                        out[(b * seq + i) * d + h * dh + c] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mask in [AttnMask::Causal, AttnMask::Full] {
            let (q, k, v) = (
                randn(&mut rng, &[12, 8]),
                randn(&mut rng, &[12, 8]),
                randn(&mut rng, &[12, 8]),
            );
            let mut g = Graph::new();
            let (vq, vk, vv) = (
                g.constant(q.clone()),
                g.constant(k.clone()),
                g.constant(v.clone()),
            );
            let o = g.attention(vq, vk, vv, 2, 6, &mask).unwrap();
            let expect = naive_attention(&q, &k, &v, 2, 6, &mask);
            for (a, b) in g.value(o).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_single_visible_key_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = 5;
        // each query sees only key (i + 2) % seq
        let mut visible = vec![false; seq * seq];
        for i in 0..seq {
            visible[i * seq + (i + 2) % seq] = true;
        }
        let mask = AttnMask::Custom { len: seq, visible };
        let (q, k, v) = (
            randn(&mut rng, &[5, 4]),
            randn(&mut rng, &[5, 4]),
            randn(&mut rng, &[5, 4]),
        );
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let o = g.attention(vq, vk, vv, 1, seq, &mask).unwrap();
        for i in 0..seq {
            assert_eq!(g.value(o).row(i), v.row((i + 2) % seq));
        }

        // uniform scores: output is the mean of visible values
        let z = g.constant(Tensor::zeros(&[5, 4]));
        let o = g.attention(z, z, vv, 1, seq, &AttnMask::Causal).unwrap();
        for i in 0..seq {
            for c in 0..4 {
                let mean = (0..=i).map(|j| v.at(j, c)).sum::<f64>() / (i + 1) as f64;
                assert!((g.value(o).at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_output_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = 7;
        let (q, k, v) = (
            randn(&mut rng, &[7, 1]),
            randn(&mut rng, &[7, 1]),
            randn(&mut rng, &[7, 1]),
        );
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let o = g.attention(vq, vk, vv, 1, seq, &AttnMask::Causal).unwrap();
        for i in 0..seq {
            let vis = &v.data()[..=i];
            let lo = vis.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vis.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let y = g.value(o).at(i, 0);
            assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }

    #[test]
    fn attention_fully_masked_row_errors() {
        let mut visible = vec![true; 9];
        visible[3..6].fill(false);
        let mask = AttnMask::Custom { len: 3, visible };
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g.attention(z, z, z, 1, 3, &mask),
            Err(Error::NoVisibleKey { row: 1 })
        ));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        grad_check(vec![a.clone(), b], |g, v| {
            let m = g.matmul(v[0], v[1]).unwrap();
            let s = g.sigmoid(m).unwrap();
            let m2 = g.mul(s, m).unwrap();
            g.sum(m2).unwrap()
        });
        let bias = randn(&mut rng, &[4]);
        grad_check(vec![a.clone(), bias], |g, v| {
            let x = g.add_row(v[0], v[1]).unwrap();
            let x = g.gelu(x).unwrap();
            let y = g.scale(x, 0.7).unwrap();
            let yy = g.mul(y, y).unwrap();
            g.mean(yy).unwrap()
        });
        let c = randn(&mut rng, &[3, 2]);
        grad_check(vec![a.clone(), c], |g, v| {
            let x = g.concat(&[v[0], v[1]], 1).unwrap();
            let x = g.slice_cols(x, 1, 5).unwrap();
            let y = g.concat(&[x, x], 0).unwrap();
            let y = g.slice_rows(y, 2, 5).unwrap();
            let y = g.scale_rows(y, &[1.0, 0.0, 2.0]).unwrap();
            let yy = g.mul(y, y).unwrap();
            g.sum(yy).unwrap()
        });
        let gain = randn(&mut rng, &[4]);
        let lb = randn(&mut rng, &[4]);
        let w = randn(&mut rng, &[3, 4]);
        grad_check(vec![a, gain, lb], move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let wc = g.constant(w.clone());
            let p = g.mul(y, wc).unwrap();
            g.sum(p).unwrap()
        });
        let table = randn(&mut rng, &[5, 3]);
        grad_check(vec![table], |g, v| {
            let e = g.embedding(v[0], &[4, 1, 4]).unwrap();
            let ee = g.mul(e, e).unwrap();
            g.sum(ee).unwrap()
        });
    }

    #[test]
    fn embedding_gradient_touches_only_looked_up_rows() {
        let mut g = Graph::new();
        let t = g.variable(Tensor::filled(&[6, 2], 0.5));
        let e = g.embedding(t, &[1, 4]).unwrap();
        let s = g.sum(e).unwrap();
        let grad = g.backward(s).unwrap().wrt(&g, t);
        for r in 0..6 {
            let expect = if r == 1 || r == 4 { 1.0 } else { 0.0 };
            assert_eq!(&grad[r * 2..r * 2 + 2], &[expect, expect]);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (q, k, v) = (
            randn(&mut rng, &[8, 4]),
            randn(&mut rng, &[8, 4]),
            randn(&mut rng, &[8, 4]),
        );
        let w = randn(&mut rng, &[8, 4]);
        for mask in [AttnMask::Causal, AttnMask::Full] {
            let w = w.clone();
            grad_check(vec![q.clone(), k.clone(), v.clone()], move |g, x| {
                let o = g.attention(x[0], x[1], x[2], 2, 4, &mask).unwrap();
                let wc = g.constant(w.clone());
                let p = g.mul(o, wc).unwrap();
                g.sum(p).unwrap()
            });
        }
    }

    #[test]
    fn loss_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pred = randn(&mut rng, &[4, 7]);
        let mut poses = Vec::new();
        for _ in 0..4 {
            let t = randn(&mut rng, &[7]);
            let q = Quat([t.data()[3], t.data()[4], t.data()[5], t.data()[6]]).normalized();
            poses.push([
                t.data()[0],
                t.data()[1],
                t.data()[2],
                q.0[0],
                q.0[1],
                q.0[2],
                q.0[3],
            ]);
        }
        let targets = PoseTargets {
            poses,
            weights: vec![1.0, 0.0, 2.0, 1.0],
            extents: BoxExtents::new([0.3, 0.2, 0.5]).unwrap(),
        };
        grad_check(vec![pred], move |g, v| {
            g.corner_loss(v[0], targets.clone()).unwrap()
        });

        let logits = randn(&mut rng, &[5, 1]);
        grad_check(vec![logits], |g, v| {
            g.bce_logits(v[0], &[0.0, 1.0, 0.3, 1.0, 0.0], &[1.0, 1.0, 1.0, 0.0, 2.0])
                .unwrap()
        });
    }

    #[test]
    fn bce_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[1, 1]));
        assert!(g.bce_logits(x, &[1.5], &[1.0]).is_err());
    }
}
