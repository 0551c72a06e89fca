//! Fixed-size linear algebra, quaternion rotations and the positional encoding.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Complex = num_complex::Complex64;

/// Quaternions with a norm below this are rejected.
pub const QUAT_EPS: f64 = 1e-12;

/// Lower clamp applied to a scale before it is inverted.
pub const SCALE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Vec3::new(s[0], s[1], s[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Unit vector, or `None` for a (near) zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 1e-300).then(|| self * (1.0 / n))
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Azimuth `atan2(y, x)` and elevation `asin(z / |v|)` of a direction.
    pub fn azimuth_elevation(self) -> (f64, f64) {
        let r = self.norm();
        (self.y.atan2(self.x), (self.z / r).clamp(-1.0, 1.0).asin())
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const fn zeros() -> Self {
        Mat3([[0.0; 3]; 3])
    }

    pub const fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn from_diag(d: [f64; 3]) -> Self {
        Mat3([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]])
    }

    /// `a bᵀ`
    pub fn outer(a: Vec3, b: Vec3) -> Self {
        let (a, b) = (a.to_array(), b.to_array());
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = a[i] * b[j];
            }
        }
        Mat3(m)
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        Mat3(r)
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: Vec3) -> f64 {
        v.dot(self.mul_vec(v))
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut r = self.0;
        r.iter_mut().flatten().for_each(|v| *v *= s);
        Mat3(r)
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut r = self.0;
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] += o.0[i][j];
            }
        }
        Mat3(r)
    }

    /// Frobenius inner product `Σ A_ij B_ij`.
    pub fn frobenius_dot(&self, o: &Mat3) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += self.0[i][j] * o.0[i][j];
            }
        }
        s
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn diag(&self) -> [f64; 3] {
        [self.0[0][0], self.0[1][1], self.0[2][2]]
    }
}

/// Quaternion `w + xi + yj + zk`. Not necessarily unit length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Quaternion::new(s[0], s[1], s[2], s[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0));
        let (s, c) = (0.5 * angle).sin_cos();
        Quaternion::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Quaternion> {
        let n = self.norm();
        if !(n >= QUAT_EPS) {
            return Err(Error::DegenerateRotation(n));
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self * o`.
    pub fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

/// Rotation matrix of the normalized quaternion.
pub fn build_rotation(q: Quaternion) -> Result<Mat3> {
    let Quaternion { w, x, y, z } = q.normalized()?;
    Ok(Mat3([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]))
}

/// Pulls `∂L/∂R` back to the raw (unnormalized) quaternion.
pub fn build_rotation_backward(q: Quaternion, grad_r: &Mat3) -> Result<[f64; 4]> {
    let n = q.norm();
    let Quaternion { w, x, y, z } = q.normalized()?;
    let g = &grad_r.0;

    // ∂L/∂q̂ for the unit quaternion, entry by entry of R.
    let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
        + z * g[2][0]
        + w * g[2][1]
        - 2.0 * x * g[2][2]);
    let gy = 2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
        - w * g[2][0]
        + z * g[2][1]
        - 2.0 * y * g[2][2]);
    let gz = 2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
        + y * g[1][2]
        + x * g[2][0]
        + y * g[2][1]);

    // Normalization: ∂q̂/∂q = (I - q̂q̂ᵀ)/|q|.
    let gq = [gw, gx, gy, gz];
    let qh = [w, x, y, z];
    let proj: f64 = gq.iter().zip(&qh).map(|(a, b)| a * b).sum();
    Ok(std::array::from_fn(|k| (gq[k] - qh[k] * proj) / n))
}

/// `R diag(1/max(s, eps)²) Rᵀ`
pub fn build_covariance_inverse(r: &Mat3, s: [f64; 3], eps: f64) -> Mat3 {
    let d = s.map(|v| {
        let c = v.max(eps);
        1.0 / (c * c)
    });
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = (0..3).map(|k| r.0[i][k] * d[k] * r.0[j][k]).sum();
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Mat3(m)
}

/// Output length of [`positional_encode`] for a `dim`-vector and `bands` frequencies.
pub const fn encoded_len(dim: usize, bands: usize) -> usize {
    dim * (1 + 2 * bands)
}

/// Encoded feature vector, layout `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L-1}πx), cos(2^{L-1}πx)]`
/// with each block of length `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVec(pub Vec<f64>);

impl EncodedVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn positional_encode(x: &[f64], bands: usize) -> EncodedVec {
    let mut out = vec![0.0; encoded_len(x.len(), bands)];
    positional_encode_into(x, bands, &mut out);
    EncodedVec(out)
}

pub fn positional_encode_into(x: &[f64], bands: usize, out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(out.len(), encoded_len(d, bands));
    out[..d].copy_from_slice(x);
    let mut freq = PI;
    for l in 0..bands {
        let base = d * (1 + 2 * l);
        for (k, &v) in x.iter().enumerate() {
            let (s, c) = (freq * v).sin_cos();
            out[base + k] = s;
            out[base + d + k] = c;
        }
        freq *= 2.0;
    }
}

/// Adds `(∂γ/∂x)ᵀ grad` to `grad_x`.
pub fn positional_encode_backward(x: &[f64], bands: usize, grad: &[f64], grad_x: &mut [f64]) {
    let d = x.len();
    for k in 0..d {
        grad_x[k] += grad[k];
    }
    let mut freq = PI;
    for l in 0..bands {
        let base = d * (1 + 2 * l);
        for (k, &v) in x.iter().enumerate() {
            let (s, c) = (freq * v).sin_cos();
            grad_x[k] += freq * (c * grad[base + k] - s * grad[base + d + k]);
        }
        freq *= 2.0;
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    /// Smallest box containing every point; `None` for an empty iterator.
    pub fn from_points(points: impl IntoIterator<Item = Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Aabb::new(first, first);
        for p in it {
            b.min = Vec3::new(b.min.x.min(p.x), b.min.y.min(p.y), b.min.z.min(p.z));
            b.max = Vec3::new(b.max.x.max(p.x), b.max.y.max(p.y), b.max.z.max(p.z));
        }
        Some(b)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
