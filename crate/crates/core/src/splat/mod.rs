//! Splatting variants that project 3D Gaussians onto the (tx element, rx element)
//! grid as seen from the receiver.
//!
//! A Gaussian at `μ` seen from `r_j` lands at grid coordinate `uv` via its longitude
//! and latitude; its 3D covariance is pushed through the projection Jacobian and
//! evaluated at every cell center `(t + ½, r + ½)`.

mod cs1;
mod cs2;

pub use cs1::{Cs1Model, Cs1Cache};
pub use cs2::{Cs2Model, Cs2Cache};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::antenna::ArraySpec;
use crate::error::{Error, Result};
use crate::math::{build_rotation, build_rotation_backward, sigmoid, softplus, softplus_inverse, Aabb, Mat3, Quaternion, Vec3};

/// Added to the projected 2D covariance diagonal.
pub const FOOTPRINT_EPS: f64 = 1e-6;

/// Horizontal distance below which a direction counts as a pole.
const POLE_EPS: f64 = 1e-9;

/// Grid coordinates `(u, v)` and range `r` of `μ` seen from `r_j`.
pub fn cs1_project(mu: Vec3, r_j: Vec3, nt: usize, nr: usize) -> Result<([f64; 2], f64)> {
    let d = mu - r_j;
    let r = d.norm();
    let rho = d.x.hypot(d.y);
    if r < POLE_EPS {
        return Err(Error::SingularGeometry("gaussian coincides with the receiver"));
    }
    if rho < POLE_EPS {
        return Err(Error::SingularGeometry("gaussian lies at a pole of the projection"));
    }
    let lon = d.y.atan2(d.x);
    let lat = (d.z / r).clamp(-1.0, 1.0).asin();
    let sx = lon / PI;
    let sy = 2.0 * lat / PI;
    let u = (sx + 0.5) * (nt as f64 - 1.0) + 0.5;
    let v = (sy + 0.5) * (nr as f64 - 1.0) + 0.5;
    Ok(([u, v], r))
}

/// `∂(u, v)/∂d` for `d = μ - r_j`.
pub fn cs1_jacobian(d: Vec3, nt: usize, nr: usize) -> Result<[[f64; 3]; 2]> {
    let (x, y, z) = (d.x, d.y, d.z);
    let rho2 = x * x + y * y;
    let rho = rho2.sqrt();
    let r2 = rho2 + z * z;
    if rho < POLE_EPS {
        return Err(Error::SingularGeometry("gaussian lies at a pole of the projection"));
    }
    let cu = (nt as f64 - 1.0) / PI;
    let cv = 2.0 * (nr as f64 - 1.0) / PI;
    Ok([
        [-cu * y / rho2, cu * x / rho2, 0.0],
        [-cv * z * x / (r2 * rho), -cv * z * y / (r2 * rho), cv * rho / r2],
    ])
}

/// `Σ_ab g[a][b] ∂J_ab/∂d`
fn jacobian_vjp(d: Vec3, nt: usize, nr: usize, g: &[[f64; 3]; 2]) -> Vec3 {
    let (x, y, z) = (d.x, d.y, d.z);
    let rho2 = x * x + y * y;
    let rho = rho2.sqrt();
    let rho3 = rho2 * rho;
    let rho4 = rho2 * rho2;
    let r2 = rho2 + z * z;
    let r4 = r2 * r2;
    let cu = (nt as f64 - 1.0) / PI;
    let cv = 2.0 * (nr as f64 - 1.0) / PI;

    // Row u: [-y/ρ², x/ρ², 0]
    let a = [2.0 * x * y / rho4, (y * y - x * x) / rho4, 0.0];
    let b = [(y * y - x * x) / rho4, -2.0 * x * y / rho4, 0.0];
    // Row v: [-zx/(r²ρ), -zy/(r²ρ), ρ/r²]
    let cross = z * x * y * (2.0 / (r4 * rho) + 1.0 / (r2 * rho3));
    let c = [
        -z * (1.0 / (r2 * rho) - 2.0 * x * x / (r4 * rho) - x * x / (r2 * rho3)),
        cross,
        -x / (r2 * rho) + 2.0 * x * z * z / (r4 * rho),
    ];
    let e = [
        cross,
        -z * (1.0 / (r2 * rho) - 2.0 * y * y / (r4 * rho) - y * y / (r2 * rho3)),
        -y / (r2 * rho) + 2.0 * y * z * z / (r4 * rho),
    ];
    let f = [x / (rho * r2) - 2.0 * rho * x / r4, y / (rho * r2) - 2.0 * rho * y / r4, -2.0 * rho * z / r4];
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = cu * (g[0][0] * a[k] + g[0][1] * b[k] + g[0][2] * 0.0)
            + cv * (g[1][0] * c[k] + g[1][1] * e[k] + g[1][2] * f[k]);
    }
    Vec3::from(out)
}

/// A Gaussian's projected footprint on the `N_t × N_r` grid.
#[derive(Clone, Debug)]
pub struct Footprint {
    pub d: Vec3,
    pub uv: [f64; 2],
    pub jac: [[f64; 3]; 2],
    /// Inverse of the projected 2D covariance.
    pub prec: [[f64; 2]; 2],
    /// `σ[t·N_r + r]`
    pub sigma: Vec<f64>,
}

fn cell_delta(uv: [f64; 2], t: usize, r: usize) -> [f64; 2] {
    [uv[0] - (t as f64 + 0.5), uv[1] - (r as f64 + 0.5)]
}

/// `None` when `μ` sits at a pole as seen from `r_j`.
pub fn footprint(mu: Vec3, r_j: Vec3, cov3: &Mat3, nt: usize, nr: usize) -> Option<Footprint> {
    let (uv, _) = cs1_project(mu, r_j, nt, nr).ok()?;
    let d = mu - r_j;
    let jac = cs1_jacobian(d, nt, nr).ok()?;
    let mut s2 = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut v = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    v += jac[a][i] * cov3.0[i][j] * jac[b][j];
                }
            }
            s2[a][b] = v;
        }
    }
    s2[0][0] += FOOTPRINT_EPS;
    s2[1][1] += FOOTPRINT_EPS;
    let det = s2[0][0] * s2[1][1] - s2[0][1] * s2[1][0];
    let prec = [[s2[1][1] / det, -s2[0][1] / det], [-s2[1][0] / det, s2[0][0] / det]];
    let mut sigma = Vec::with_capacity(nt * nr);
    for t in 0..nt {
        for r in 0..nr {
            let dl = cell_delta(uv, t, r);
            let q = dl[0] * (prec[0][0] * dl[0] + prec[0][1] * dl[1]) + dl[1] * (prec[1][0] * dl[0] + prec[1][1] * dl[1]);
            sigma.push((-0.5 * q).exp());
        }
    }
    Some(Footprint { d, uv, jac, prec, sigma })
}

/// Pulls `∂L/∂σ` back to `μ` and the 3D covariance.
pub fn footprint_backward(fp: &Footprint, cov3: &Mat3, g_sigma: &[f64], nt: usize, nr: usize) -> (Vec3, Mat3) {
    let p = &fp.prec;
    let mut g_uv = [0.0; 2];
    let mut g_s2 = [[0.0; 2]; 2];
    for t in 0..nt {
        for r in 0..nr {
            let k = t * nr + r;
            let gs = g_sigma[k] * fp.sigma[k];
            if gs == 0.0 {
                continue;
            }
            let dl = cell_delta(fp.uv, t, r);
            let pd = [p[0][0] * dl[0] + p[0][1] * dl[1], p[1][0] * dl[0] + p[1][1] * dl[1]];
            g_uv[0] -= gs * pd[0];
            g_uv[1] -= gs * pd[1];
            for a in 0..2 {
                for b in 0..2 {
                    g_s2[a][b] += 0.5 * gs * pd[a] * pd[b];
                }
            }
        }
    }
    // Σ2 = J Σ3 Jᵀ + εI
    let j = &fp.jac;
    let mut js = [[0.0; 3]; 2];
    for a in 0..2 {
        for i in 0..3 {
            js[a][i] = (0..3).map(|k| j[a][k] * cov3.0[k][i]).sum();
        }
    }
    let mut g_j = [[0.0; 3]; 2];
    for a in 0..2 {
        for i in 0..3 {
            g_j[a][i] = (0..2).map(|b| (g_s2[a][b] + g_s2[b][a]) * js[b][i]).sum();
        }
    }
    let mut g_cov = Mat3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            let mut v = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    v += j[a][i] * g_s2[a][b] * j[b][k];
                }
            }
            g_cov.0[i][k] = v;
        }
    }
    let mut g_d = Vec3::new(
        j[0][0] * g_uv[0] + j[1][0] * g_uv[1],
        j[0][1] * g_uv[0] + j[1][1] * g_uv[1],
        j[0][2] * g_uv[0] + j[1][2] * g_uv[1],
    );
    g_d += jacobian_vjp(fp.d, nt, nr, &g_j);
    (g_d, g_cov)
}

/// Per-Gaussian shape parameters shared by both splatting variants.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatShapes {
    pub means: Vec<f64>,
    pub quats: Vec<f64>,
    /// Scales are `softplus(scale_raw)`.
    pub scale_raw: Vec<f64>,
    /// Activation (opacity) is `sigmoid(opacity_raw)`.
    pub opacity_raw: Vec<f64>,
}

impl SplatShapes {
    pub fn init<R: Rng>(n: usize, bounds: &Aabb, s_init: f64, rng: &mut R) -> Self {
        let g = crate::gaussian::GaussianSet::init(n, bounds, s_init, rng);
        SplatShapes {
            means: g.means,
            quats: g.quats,
            scale_raw: vec![softplus_inverse(s_init); 3 * n],
            opacity_raw: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_raw.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.len();
        if self.means.len() != 3 * n || self.quats.len() != 4 * n || self.scale_raw.len() != 3 * n {
            return Err(Error::shape("splat parameter arrays disagree on N"));
        }
        Ok(())
    }

    pub fn mean(&self, i: usize) -> Vec3 {
        Vec3::from_slice(&self.means[3 * i..3 * i + 3])
    }

    pub fn quat(&self, i: usize) -> Quaternion {
        Quaternion::from_slice(&self.quats[4 * i..4 * i + 4])
    }

    pub fn scales(&self, i: usize) -> [f64; 3] {
        std::array::from_fn(|k| softplus(self.scale_raw[3 * i + k]))
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_raw[i])
    }

    /// `Σ = (R S)(R S)ᵀ`
    pub fn covariance(&self, i: usize) -> Result<(Mat3, Mat3)> {
        let r = build_rotation(self.quat(i))?;
        let m = r.mul_mat(&Mat3::from_diag(self.scales(i)));
        Ok((r, m.mul_mat(&m.transpose())))
    }

    /// `∂L/∂Σ` to `(∂L/∂q, ∂L/∂scale_raw)`.
    pub fn covariance_backward(&self, i: usize, rot: &Mat3, g_cov: &Mat3) -> Result<([f64; 4], [f64; 3])> {
        let s = self.scales(i);
        let m = rot.mul_mat(&Mat3::from_diag(s));
        let g_m = g_cov.add(&g_cov.transpose()).mul_mat(&m);
        let g_r = g_m.mul_mat(&Mat3::from_diag(s));
        let g_s = rot.transpose().mul_mat(&g_m).diag();
        let g_q = build_rotation_backward(self.quat(i), &g_r)?;
        let g_raw = std::array::from_fn(|k| g_s[k] * sigmoid(self.scale_raw[3 * i + k]));
        Ok((g_q, g_raw))
    }

    pub fn all_scales(&self) -> Vec<f64> {
        self.scale_raw.iter().map(|&v| softplus(v)).collect()
    }

    pub fn all_opacities(&self) -> Vec<f64> {
        self.opacity_raw.iter().map(|&v| sigmoid(v)).collect()
    }
}

/// Configuration shared by both splatting variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatConfig {
    pub n_gaussians: usize,
    pub s_init: f64,
    pub carrier_hz: f64,
    pub tx_array: ArraySpec,
    pub rx_array: ArraySpec,
}

impl Default for SplatConfig {
    fn default() -> Self {
        SplatConfig {
            n_gaussians: 1000,
            s_init: 0.137,
            carrier_hz: 2.4e9,
            tx_array: ArraySpec::single(),
            rx_array: ArraySpec::single(),
        }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 {
            return Err(Error::EmptyModel);
        }
        if !(self.carrier_hz > 0.0) {
            return Err(Error::InvalidArgument("carrier must be positive".into()));
        }
        self.tx_array.validate()?;
        self.rx_array.validate()
    }

    pub fn wavelength(&self) -> f64 {
        crate::antenna::wavelength(self.carrier_hz)
    }

    pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}

/// `exp(-j k cosθ (x cosφ + y sinφ))` for every in-plane element coordinate.
pub fn planar_steering(coords: &[(f64, f64)], k: f64, az: f64, el: f64) -> Vec<crate::math::Complex> {
    coords.iter().map(|&(x, y)| crate::math::Complex::from_polar(1.0, planar_phase(x, y, k, az, el))).collect()
}

pub(crate) fn planar_phase(x: f64, y: f64, k: f64, az: f64, el: f64) -> f64 {
    -k * el.cos() * (x * az.cos() + y * az.sin())
}

/// `(∂ψ/∂φ, ∂ψ/∂θ)` of [`planar_phase`].
pub(crate) fn planar_phase_grad(x: f64, y: f64, k: f64, az: f64, el: f64) -> (f64, f64) {
    let proj = x * az.cos() + y * az.sin();
    (-k * el.cos() * (-x * az.sin() + y * az.cos()), k * el.sin() * proj)
}

/// `(∂φ/∂v, ∂θ/∂v)` for azimuth `atan2(v_y, v_x)` and elevation `asin(v_z/|v|)`.
pub(crate) fn angle_grads(v: Vec3) -> Option<(Vec3, Vec3)> {
    let rho2 = v.x * v.x + v.y * v.y;
    let rho = rho2.sqrt();
    if rho < POLE_EPS {
        return None;
    }
    let r2 = rho2 + v.z * v.z;
    Some((
        Vec3::new(-v.y / rho2, v.x / rho2, 0.0),
        Vec3::new(-v.z * v.x / (r2 * rho), -v.z * v.y / (r2 * rho), rho / r2),
    ))
}
