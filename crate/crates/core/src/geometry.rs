//! Pose algebra and the oriented-box corner metric.
//!
//! Poses are a position plus a scalar-first unit quaternion. The corner
//! metric maps a pose to the eight corners of a box rigidly attached to it,
//! which puts rotation and translation error on the same (metric) scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on |q| accepted by operations that require a unit quaternion.
pub const UNIT_TOL: f64 = 1e-6;

pub const DEFAULT_BIN_SIZE: f64 = 0.01;
pub const DEFAULT_VOCAB_MAX: usize = 4096;

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Scalar-first quaternion `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let n = norm(axis);
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let k = s / n;
        Quat([c, axis[0] * k, axis[1] * k, axis[2] * k])
    }

    pub fn from_yaw(yaw: f64) -> Quat {
        Quat::from_axis_angle([0.0, 0.0, 1.0], yaw)
    }

    pub fn w(&self) -> f64 {
        self.0[0]
    }

    pub fn vec(&self) -> Vec3 {
        [self.0[1], self.0[2], self.0[3]]
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit quaternion in the same direction; the zero quaternion maps to identity.
    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        if n < 1e-12 || !n.is_finite() {
            return Quat::IDENTITY;
        }
        Quat(self.0.map(|v| v / n))
    }

    /// Representative with `w >= 0`; for `w == 0` the first nonzero component is positive.
    pub fn canonical(&self) -> Quat {
        let first = self.0.iter().copied().find(|v| *v != 0.0).unwrap_or(1.0);
        if self.0[0] < 0.0 || (self.0[0] == 0.0 && first < 0.0) {
            Quat(self.0.map(|v| -v))
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Quat {
        let [w, x, y, z] = self.0;
        Quat([w, -x, -y, -z])
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = rhs.0;
        Quat([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    /// `R(q)·v` without the unit-norm check. Exact for unit `q`.
    #[inline]
    pub fn rotate_unchecked(&self, v: Vec3) -> Vec3 {
        let w = self.0[0];
        let u = self.vec();
        let uu = dot(u, u);
        let uv = dot(u, v);
        let uxv = cross(u, v);
        let a = w * w - uu;
        [
            a * v[0] + 2.0 * uv * u[0] + 2.0 * w * uxv[0],
            a * v[1] + 2.0 * uv * u[1] + 2.0 * w * uxv[1],
            a * v[2] + 2.0 * uv * u[2] + 2.0 * w * uxv[2],
        ]
    }

    /// Row-major 3x3 rotation matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.0;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotation angle between two orientations, in `[0, pi]`.
    pub fn angle_to(&self, other: &Quat) -> f64 {
        let d = self.dot(other).abs().min(1.0);
        2.0 * d.acos()
    }

    /// Heading about +z.
    pub fn yaw(&self) -> f64 {
        let [w, x, y, z] = self.0;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    /// Spherical interpolation along the short arc.
    pub fn slerp(&self, other: &Quat, t: f64) -> Quat {
        let mut b = *other;
        let mut d = self.dot(&b);
        if d < 0.0 {
            b = Quat(b.0.map(|v| -v));
            d = -d;
        }
        if d > 1.0 - 1e-12 {
            let mut out = [0.0; 4];
            for i in 0..4 {
                out[i] = self.0[i] + t * (b.0[i] - self.0[i]);
            }
            return Quat(out).normalized();
        }
        let theta = d.min(1.0).acos();
        let s = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / s;
        let wb = (t * theta).sin() / s;
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = wa * self.0[i] + wb * b.0[i];
        }
        Quat(out).normalized()
    }
}

/// `R(q)·v`; rejects quaternions that are not unit within [`UNIT_TOL`].
pub fn rotate_point(q: &Quat, v: Vec3) -> Result<Vec3> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidRotation { norm: n });
    }
    Ok(q.rotate_unchecked(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub p: Vec3,
    pub q: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        p: [0.0; 3],
        q: Quat::IDENTITY,
    };

    /// Normalizes `q`; a zero or non-finite quaternion is rejected.
    pub fn new(p: Vec3, q: Quat) -> Result<Pose> {
        let n = q.norm();
        if !(n.is_finite() && n > 1e-12) || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation { norm: n });
        }
        Ok(Pose {
            p,
            q: Quat(q.0.map(|v| v / n)),
        })
    }

    pub fn from_translation(p: Vec3) -> Pose {
        Pose {
            p,
            q: Quat::IDENTITY,
        }
    }

    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
        Pose {
            p: [x, y, z],
            q: Quat::from_yaw(yaw),
        }
    }

    /// Reads `[px, py, pz, qw, qx, qy, qz]`, normalizing the quaternion
    /// (zero quaternion becomes identity).
    pub fn from_slice(v: &[f64]) -> Pose {
        Pose {
            p: [v[0], v[1], v[2]],
            q: Quat([v[3], v[4], v[5], v[6]]).normalized(),
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.p[0],
            self.p[1],
            self.p[2],
            self.q.0[0],
            self.q.0[1],
            self.q.0[2],
            self.q.0[3],
        ]
    }

    pub fn canonical(&self) -> Pose {
        Pose {
            p: self.p,
            q: self.q.canonical(),
        }
    }

    /// `self ∘ rhs`: rhs expressed in self's frame, mapped to the outer frame.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            p: add(self.p, self.q.rotate_unchecked(rhs.p)),
            q: self.q.mul(&rhs.q).normalized(),
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.conjugate();
        Pose {
            p: scale(qi.rotate_unchecked(self.p), -1.0),
            q: qi,
        }
    }

    pub fn transform_point(&self, v: Vec3) -> Vec3 {
        add(self.p, self.q.rotate_unchecked(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxExtents(Vec3);

impl BoxExtents {
    pub fn new(h: Vec3) -> Result<BoxExtents> {
        if h.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(BoxExtents(h))
        } else {
            Err(Error::InvalidInput(format!(
                "box half-extents must be strictly positive, got {h:?}"
            )))
        }
    }

    pub fn cube(h: f64) -> Result<BoxExtents> {
        BoxExtents::new([h, h, h])
    }

    pub fn half(&self) -> Vec3 {
        self.0
    }

    /// Local corner `k` (0..8): bit0 selects x, bit1 y, bit2 z; a clear bit is the minus side.
    #[inline]
    pub fn local_corner(&self, k: usize) -> Vec3 {
        let sign = |bit: usize| if (k >> bit) & 1 == 1 { 1.0 } else { -1.0 };
        [
            sign(0) * self.0[0],
            sign(1) * self.0[1],
            sign(2) * self.0[2],
        ]
    }
}

impl Default for BoxExtents {
    fn default() -> Self {
        BoxExtents([0.05, 0.05, 0.05])
    }
}

/// The eight box corners of `extents` placed at `pose`, in binary-sign order.
pub fn corners(pose: &Pose, extents: &BoxExtents) -> [Vec3; 8] {
    let mut out = [[0.0; 3]; 8];
    for (k, c) in out.iter_mut().enumerate() {
        *c = pose.transform_point(extents.local_corner(k));
    }
    out
}

/// Sum over the eight corners of the Euclidean distance between matching corners.
pub fn corner_distance(a: &Pose, b: &Pose, extents: &BoxExtents) -> f64 {
    let ca = corners(a, extents);
    let cb = corners(b, extents);
    ca.iter()
        .zip(cb.iter())
        .map(|(x, y)| norm(sub(*x, *y)))
        .sum()
}

/// Token quantization for cumulative corner-path length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScale {
    pub bin_size: f64,
    pub vocab_max: usize,
}

impl Default for TokenScale {
    fn default() -> Self {
        TokenScale {
            bin_size: DEFAULT_BIN_SIZE,
            vocab_max: DEFAULT_VOCAB_MAX,
        }
    }
}

impl TokenScale {
    pub fn quantize(&self, cumulative: f64) -> usize {
        let n = (cumulative / self.bin_size).floor();
        if n <= 0.0 {
            0
        } else {
            (n as usize).min(self.vocab_max - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_size > 0.0) || self.vocab_max == 0 {
            return Err(Error::InvalidInput(format!(
                "bin_size must be > 0 and vocab_max >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Token of the last pose in `path`: the cumulative corner distance traversed
/// since `path[0]`, quantized by `scale`.
pub fn positional_token(path: &[Pose], extents: &BoxExtents, scale: &TokenScale) -> Result<usize> {
    Ok(*positional_tokens(path, extents, scale)?
        .last()
        .expect("non-empty"))
}

/// Tokens for every prefix of `path`. Element `t` equals
/// `positional_token(&path[..=t])`.
pub fn positional_tokens(
    path: &[Pose],
    extents: &BoxExtents,
    scale: &TokenScale,
) -> Result<Vec<usize>> {
    if path.is_empty() {
        return Err(Error::InvalidInput(
            "positional token of an empty path".into(),
        ));
    }
    scale.validate()?;
    let mut out = Vec::with_capacity(path.len());
    let mut cumulative = 0.0;
    out.push(0);
    for w in path.windows(2) {
        cumulative += corner_distance(&w[1], &w[0], extents);
        out.push(scale.quantize(cumulative));
    }
    Ok(out)
}

/// Running accumulator for tokens along a path that grows one pose at a time.
#[derive(Debug, Clone)]
pub struct TokenAccumulator {
    extents: BoxExtents,
    scale: TokenScale,
    last: Option<Pose>,
    cumulative: f64,
}

impl TokenAccumulator {
    pub fn new(extents: BoxExtents, scale: TokenScale) -> Self {
        TokenAccumulator {
            extents,
            scale,
            last: None,
            cumulative: 0.0,
        }
    }

    /// Appends a pose and returns its token.
    pub fn push(&mut self, pose: &Pose) -> usize {
        if let Some(prev) = &self.last {
            self.cumulative += corner_distance(pose, prev, &self.extents);
        }
        self.last = Some(*pose);
        self.scale.quantize(self.cumulative)
    }
}
