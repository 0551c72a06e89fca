//! Gaussian primitives and their spatial weights at receiver positions.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{
    build_covariance_inverse, build_rotation, build_rotation_backward, Aabb, Mat3, Quaternion, Vec3,
    SCALE_EPS,
};

/// Squared Mahalanobis distances are clamped here before exponentiation.
pub const M2_CLAMP: f64 = 50.0;

/// Gaussians in flat storage: means `N×3`, quaternions `N×4` (w, x, y, z),
/// log-scales `N×3`. Scales are `exp(log_scales)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<f64>,
    pub quats: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl GaussianSet {
    /// Means uniform in `bounds`, identity rotations, isotropic scale `s_init`.
    pub fn init<R: Rng>(n: usize, bounds: &Aabb, s_init: f64, rng: &mut R) -> Self {
        let mut means = Vec::with_capacity(3 * n);
        for _ in 0..n {
            for (lo, hi) in [
                (bounds.min.x, bounds.max.x),
                (bounds.min.y, bounds.max.y),
                (bounds.min.z, bounds.max.z),
            ] {
                means.push(if hi > lo { rng.gen_range(lo..hi) } else { lo });
            }
        }
        let quats = (0..n).flat_map(|_| Quaternion::IDENTITY.to_array()).collect();
        GaussianSet { means, quats, log_scales: vec![s_init.ln(); 3 * n] }
    }

    pub fn len(&self) -> usize {
        self.means.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean(&self, i: usize) -> Vec3 {
        Vec3::from_slice(&self.means[3 * i..3 * i + 3])
    }

    pub fn quat(&self, i: usize) -> Quaternion {
        Quaternion::from_slice(&self.quats[4 * i..4 * i + 4])
    }

    pub fn scales(&self, i: usize) -> [f64; 3] {
        std::array::from_fn(|k| self.log_scales[3 * i + k].exp())
    }

    pub fn check(&self) -> Result<()> {
        let n = self.len();
        if self.means.len() != 3 * n || self.quats.len() != 4 * n || self.log_scales.len() != 3 * n {
            return Err(Error::shape("gaussian parameter arrays disagree on N"));
        }
        Ok(())
    }

    /// Rotation and inverse covariance of every Gaussian.
    pub fn geometry(&self) -> Result<Vec<GaussianGeometry>> {
        self.check()?;
        (0..self.len())
            .map(|i| {
                let rotation = build_rotation(self.quat(i))?;
                let scales = self.scales(i);
                let precision = build_covariance_inverse(&rotation, scales, SCALE_EPS);
                Ok(GaussianGeometry { rotation, scales, precision })
            })
            .collect()
    }

    /// Clamps every scale into `(SCALE_EPS, max_scale)`.
    pub fn clamp_scales(&mut self, max_scale: f64) {
        let (lo, hi) = (SCALE_EPS.ln(), max_scale.max(SCALE_EPS).ln());
        for s in &mut self.log_scales {
            *s = s.clamp(lo, hi);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianGeometry {
    pub rotation: Mat3,
    pub scales: [f64; 3],
    pub precision: Mat3,
}

/// Weights `w[b, i] = α[b, i] exp(-½ min(m², 50))` for `B` receivers and `N` Gaussians,
/// row-major over `b`.
#[derive(Clone, Debug)]
pub struct SpatialWeights {
    pub batch: usize,
    pub n: usize,
    pub w: Vec<f64>,
    pub m2: Vec<f64>,
    /// `exp(-½ min(m², 50))`
    pub falloff: Vec<f64>,
}

impl SpatialWeights {
    pub fn row(&self, b: usize) -> &[f64] {
        &self.w[b * self.n..(b + 1) * self.n]
    }
}

pub fn spatial_weights(gs: &GaussianSet, alphas: &[f64], rx: &[Vec3]) -> Result<SpatialWeights> {
    let geo = gs.geometry()?;
    spatial_weights_with(gs, &geo, alphas, rx)
}

pub(crate) fn spatial_weights_with(
    gs: &GaussianSet,
    geo: &[GaussianGeometry],
    alphas: &[f64],
    rx: &[Vec3],
) -> Result<SpatialWeights> {
    let (n, batch) = (gs.len(), rx.len());
    if alphas.len() != n * batch {
        return Err(Error::shape(format!("alphas has {} entries, expected {}x{}", alphas.len(), batch, n)));
    }
    let mut m2 = vec![0.0; n * batch];
    let mut falloff = vec![0.0; n * batch];
    let mut w = vec![0.0; n * batch];
    if n > 0 {
        m2.par_chunks_mut(n)
            .zip(falloff.par_chunks_mut(n))
            .zip(w.par_chunks_mut(n))
            .enumerate()
            .for_each(|(b, ((m2r, fr), wr))| {
                let p = rx[b];
                for i in 0..n {
                    let d = p - gs.mean(i);
                    let q = geo[i].precision.quad_form(d);
                    let f = (-0.5 * q.min(M2_CLAMP)).exp();
                    m2r[i] = q;
                    fr[i] = f;
                    wr[i] = alphas[b * n + i] * f;
                }
            });
    }
    Ok(SpatialWeights { batch, n, w, m2, falloff })
}

/// Gradients with respect to every Gaussian parameter and the per-sample activations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub means: Vec<f64>,
    pub quats: Vec<f64>,
    pub log_scales: Vec<f64>,
    /// `B×N`, same layout as the `alphas` input.
    pub alphas: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros(n: usize, batch: usize) -> Self {
        GaussianGrads {
            means: vec![0.0; 3 * n],
            quats: vec![0.0; 4 * n],
            log_scales: vec![0.0; 3 * n],
            alphas: vec![0.0; n * batch],
        }
    }
}

pub fn spatial_weights_backward(
    gs: &GaussianSet,
    alphas: &[f64],
    rx: &[Vec3],
    cached: &SpatialWeights,
    grad_w: &[f64],
) -> Result<GaussianGrads> {
    let geo = gs.geometry()?;
    spatial_weights_backward_with(gs, &geo, alphas, rx, cached, grad_w)
}

pub(crate) fn spatial_weights_backward_with(
    gs: &GaussianSet,
    geo: &[GaussianGeometry],
    alphas: &[f64],
    rx: &[Vec3],
    cached: &SpatialWeights,
    grad_w: &[f64],
) -> Result<GaussianGrads> {
    let (n, batch) = (gs.len(), rx.len());
    if cached.n != n || cached.batch != batch {
        return Err(Error::StaleCache);
    }
    if grad_w.len() != n * batch || alphas.len() != n * batch {
        return Err(Error::shape("grad_w and alphas must be B×N"));
    }
    let mut out = GaussianGrads::zeros(n, batch);
    for k in 0..n * batch {
        out.alphas[k] = grad_w[k] * cached.falloff[k];
    }

    let per: Vec<Result<([f64; 3], [f64; 4], [f64; 3])>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mu = gs.mean(i);
            let g = &geo[i];
            let mut g_prec = Mat3::zeros();
            let mut g_mu = Vec3::ZERO;
            for b in 0..batch {
                let k = b * n + i;
                if cached.m2[k] >= M2_CLAMP {
                    continue;
                }
                let g_m2 = -0.5 * grad_w[k] * alphas[k] * cached.falloff[k];
                if g_m2 == 0.0 {
                    continue;
                }
                let d = rx[b] - mu;
                // ∂m²/∂d = 2Σ⁻¹d, and d = p - μ.
                g_mu += g.precision.mul_vec(d) * (-2.0 * g_m2);
                g_prec = g_prec.add(&Mat3::outer(d, d).scale(g_m2));
            }
            // Σ⁻¹ = R D Rᵀ with D = diag(1/s²).
            let r = &g.rotation;
            let dvals = g.scales.map(|s| {
                let c = s.max(SCALE_EPS);
                1.0 / (c * c)
            });
            let g_r = g_prec.mul_mat(r).mul_mat(&Mat3::from_diag(dvals)).scale(2.0);
            let g_d = r.transpose().mul_mat(&g_prec).mul_mat(r).diag();
            let g_q = build_rotation_backward(gs.quat(i), &g_r)?;
            let g_ls = std::array::from_fn(|k| {
                let s = g.scales[k];
                if s > SCALE_EPS {
                    g_d[k] * (-2.0 / (s * s * s)) * s
                } else {
                    0.0
                }
            });
            Ok((g_mu.to_array(), g_q, g_ls))
        })
        .collect();

    for (i, r) in per.into_iter().enumerate() {
        let (m, q, s) = r?;
        out.means[3 * i..3 * i + 3].copy_from_slice(&m);
        out.quats[4 * i..4 * i + 4].copy_from_slice(&q);
        out.log_scales[3 * i..3 * i + 3].copy_from_slice(&s);
    }
    Ok(out)
}
