//! Scatterer splatting: every Gaussian is a point scatterer whose free-space path
//! `tx → μ → rx` is weighted by its footprint on the antenna grid, on top of a
//! fixed line-of-sight term.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Deserialize;

use super::{angle_grads, footprint, footprint_backward, planar_phase, planar_phase_grad, SplatConfig, SplatShapes};
use crate::channel::ChannelMatrix;
use crate::checkpoint::array_map;
use crate::error::{Error, Result};
use crate::math::{sigmoid, Aabb, Complex, Mat3, Vec3};
use crate::model::{FieldModel, Forward, GroupKind, NamedArray, ParamGroup, Query, RendererKind, Revision};
use crate::renderer::take_array;

#[derive(Clone, Debug, PartialEq)]
pub struct Cs1Model {
    pub config: SplatConfig,
    pub shapes: SplatShapes,
    /// Complex scattering coefficient per Gaussian, `(re, im)` pairs.
    pub gamma: Vec<f64>,
    version: Revision,
}

struct ArrayCtx {
    tx: Vec<(f64, f64)>,
    rx: Vec<(f64, f64)>,
    k: f64,
    lambda: f64,
}

#[derive(Default)]
struct TermGrad {
    mean: Vec3,
    quat: [f64; 4],
    scale_raw: [f64; 3],
    opacity_raw: f64,
    gamma: Complex,
}

impl Cs1Model {
    pub fn new(config: SplatConfig, bounds: &Aabb, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplatConfig::rng(seed);
        let shapes = SplatShapes::init(config.n_gaussians, bounds, config.s_init, &mut rng);
        let gamma = (0..2 * config.n_gaussians).map(|_| rand::Rng::gen_range(&mut rng, -0.1..0.1)).collect();
        Ok(Cs1Model { config, shapes, gamma, version: Revision::default() })
    }

    pub fn from_parts(config: SplatConfig, shapes: SplatShapes, gamma: Vec<f64>) -> Result<Self> {
        shapes.check()?;
        if shapes.is_empty() {
            return Err(Error::EmptyModel);
        }
        if gamma.len() != 2 * shapes.len() {
            return Err(Error::shape("gamma must hold N complex values"));
        }
        let config = SplatConfig { n_gaussians: shapes.len(), ..config };
        Ok(Cs1Model { config, shapes, gamma, version: Revision::default() })
    }

    pub fn n(&self) -> usize {
        self.shapes.len()
    }

    fn ctx(&self) -> ArrayCtx {
        let lambda = self.config.wavelength();
        ArrayCtx {
            tx: self.config.tx_array.planar_coords(lambda),
            rx: self.config.rx_array.planar_coords(lambda),
            k: 2.0 * PI / lambda,
            lambda,
        }
    }

    /// Direct path with free-space loss; constant with respect to every parameter.
    pub fn line_of_sight(&self, q: &Query) -> Result<ChannelMatrix> {
        let ctx = self.ctx();
        let v = q.rx - q.tx;
        let d = v.norm();
        if d < 1e-12 {
            return Err(Error::SingularGeometry("transmitter and receiver coincide"));
        }
        let (az, el) = v.azimuth_elevation();
        let rho = Complex::from_polar(ctx.lambda / (4.0 * PI * d), -ctx.k * d);
        let mut h = ChannelMatrix::zeros(ctx.tx.len(), ctx.rx.len());
        for (t, &(xt, yt)) in ctx.tx.iter().enumerate() {
            let pt = planar_phase(xt, yt, ctx.k, az, el);
            for (r, &(xr, yr)) in ctx.rx.iter().enumerate() {
                let pr = planar_phase(xr, yr, ctx.k, az, el);
                h.data[t * ctx.rx.len() + r] = rho * Complex::from_polar(1.0, pr - pt);
            }
        }
        Ok(h)
    }

    fn geometry(&self) -> Result<Vec<(Mat3, Mat3)>> {
        (0..self.n()).map(|i| self.shapes.covariance(i)).collect()
    }

    /// Adds Gaussian `i`'s contribution to `out`; with `grad`, returns its parameter gradient instead.
    fn term(
        &self,
        i: usize,
        q: &Query,
        geo: &(Mat3, Mat3),
        ctx: &ArrayCtx,
        out: Option<&mut [Complex]>,
        grad: Option<&[Complex]>,
    ) -> Result<Option<TermGrad>> {
        let (nt, nr) = (ctx.tx.len(), ctx.rx.len());
        let mu = self.shapes.mean(i);
        let Some(fp) = footprint(mu, q.rx, &geo.1, nt, nr) else { return Ok(None) };
        let vt = mu - q.tx;
        let vr = q.rx - mu;
        let (Some(at), Some(ar)) = (angle_grads(vt), angle_grads(vr)) else { return Ok(None) };
        let (dt, dr) = (vt.norm(), vr.norm());
        let dp = dt + dr;
        let alpha = Complex::from_polar(ctx.lambda / (4.0 * PI * dp), -ctx.k * dp);
        let gamma = Complex::new(self.gamma[2 * i], self.gamma[2 * i + 1]);
        let beta = gamma * alpha;
        let (azt, elt) = vt.azimuth_elevation();
        let (azr, elr) = vr.azimuth_elevation();
        let pt: Vec<f64> = ctx.tx.iter().map(|&(x, y)| planar_phase(x, y, ctx.k, azt, elt)).collect();
        let pr: Vec<f64> = ctx.rx.iter().map(|&(x, y)| planar_phase(x, y, ctx.k, azr, elr)).collect();
        let o = self.shapes.opacity(i);

        let Some(g) = grad else {
            let out = out.expect("forward needs an output buffer");
            for t in 0..nt {
                for r in 0..nr {
                    let k = t * nr + r;
                    out[k] += beta * Complex::from_polar(o * fp.sigma[k], pr[r] - pt[t]);
                }
            }
            return Ok(None);
        };

        let mut g_o = 0.0;
        let mut g_sigma = vec![0.0; nt * nr];
        let mut g_beta = Complex::new(0.0, 0.0);
        let mut g_pt = vec![0.0; nt];
        let mut g_pr = vec![0.0; nr];
        for t in 0..nt {
            for r in 0..nr {
                let k = t * nr + r;
                let p = Complex::from_polar(1.0, pr[r] - pt[t]);
                let x = beta * p;
                let re = g[k].re * x.re + g[k].im * x.im;
                g_o += fp.sigma[k] * re;
                g_sigma[k] = o * re;
                let w = o * fp.sigma[k];
                g_beta += p.conj() * g[k] * w;
                // ∂L/∂(phase of P): Re(conj(g_P) jP) with g_P = conj(β) w G
                let g_p = beta.conj() * g[k] * w;
                let dphase = (g_p.conj() * Complex::i() * p).re;
                g_pr[r] += dphase;
                g_pt[t] -= dphase;
            }
        }
        let g_gamma = alpha.conj() * g_beta;
        let g_alpha = gamma.conj() * g_beta;
        let g_dp = (g_alpha.conj() * alpha * Complex::new(-1.0 / dp, -ctx.k)).re;
        let mut g_mu = vt * (g_dp / dt) - vr * (g_dp / dr);

        let (mut g_azt, mut g_elt) = (0.0, 0.0);
        for (t, &(x, y)) in ctx.tx.iter().enumerate() {
            let (a, e) = planar_phase_grad(x, y, ctx.k, azt, elt);
            g_azt += g_pt[t] * a;
            g_elt += g_pt[t] * e;
        }
        let (mut g_azr, mut g_elr) = (0.0, 0.0);
        for (r, &(x, y)) in ctx.rx.iter().enumerate() {
            let (a, e) = planar_phase_grad(x, y, ctx.k, azr, elr);
            g_azr += g_pr[r] * a;
            g_elr += g_pr[r] * e;
        }
        g_mu += at.0 * g_azt + at.1 * g_elt;
        g_mu += -(ar.0 * g_azr + ar.1 * g_elr);

        let (g_d, g_cov) = footprint_backward(&fp, &geo.1, &g_sigma, nt, nr);
        g_mu += g_d;
        let (g_q, g_s) = self.shapes.covariance_backward(i, &geo.0, &g_cov)?;
        Ok(Some(TermGrad { mean: g_mu, quat: g_q, scale_raw: g_s, opacity_raw: g_o * o * (1.0 - o), gamma: g_gamma }))
    }

    pub fn import(header: &serde_json::Value, arrays: Vec<NamedArray>) -> Result<Self> {
        #[derive(Deserialize)]
        struct H {
            config: SplatConfig,
        }
        let h: H = serde_json::from_value(header.clone())?;
        let mut map = array_map(arrays);
        let shapes = SplatShapes {
            means: take_array(&mut map, "positions")?,
            quats: take_array(&mut map, "rotations")?,
            scale_raw: take_array(&mut map, "scale_raw")?,
            opacity_raw: take_array(&mut map, "opacity_raw")?,
        };
        Cs1Model::from_parts(h.config, shapes, take_array(&mut map, "gamma")?)
    }
}

pub struct Cs1Cache {
    version: u64,
    queries: Vec<Query>,
}

impl FieldModel for Cs1Model {
    type Cache = Cs1Cache;

    fn kind(&self) -> RendererKind {
        RendererKind::Cs1
    }

    fn dims(&self) -> (usize, usize) {
        (self.config.tx_array.len(), self.config.rx_array.len())
    }

    fn forward(&self, queries: &[Query]) -> Result<Forward<Cs1Cache>> {
        let channels = self.predict(queries)?;
        Ok(Forward {
            channels,
            activations: self.shapes.all_opacities(),
            scales: self.shapes.all_scales(),
            cache: Cs1Cache { version: self.version.get(), queries: queries.to_vec() },
        })
    }

    fn predict(&self, queries: &[Query]) -> Result<Vec<ChannelMatrix>> {
        let geo = self.geometry()?;
        let ctx = self.ctx();
        queries
            .par_iter()
            .map(|q| {
                let mut h = self.line_of_sight(q)?;
                for (i, g) in geo.iter().enumerate() {
                    self.term(i, q, g, &ctx, Some(&mut h.data), None)?;
                }
                Ok(h)
            })
            .collect()
    }

    fn backward(&self, cache: &Cs1Cache, grad_h: &[ChannelMatrix], grad_act: &[f64], grad_scales: &[f64]) -> Result<Vec<Vec<f64>>> {
        if cache.version != self.version.get() {
            return Err(Error::StaleCache);
        }
        if grad_h.len() != cache.queries.len() {
            return Err(Error::shape("grad_h batch size"));
        }
        let (nt, nr) = self.dims();
        if grad_h.iter().any(|g| g.dims() != (nt, nr)) {
            return Err(Error::shape("grad_h antenna dims"));
        }
        let n = self.n();
        let geo = self.geometry()?;
        let ctx = self.ctx();
        let per: Vec<Result<TermGrad>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = TermGrad::default();
                for (q, g) in cache.queries.iter().zip(grad_h) {
                    if let Some(tg) = self.term(i, q, &geo[i], &ctx, None, Some(&g.data))? {
                        acc.mean += tg.mean;
                        (0..4).for_each(|k| acc.quat[k] += tg.quat[k]);
                        (0..3).for_each(|k| acc.scale_raw[k] += tg.scale_raw[k]);
                        acc.opacity_raw += tg.opacity_raw;
                        acc.gamma += tg.gamma;
                    }
                }
                Ok(acc)
            })
            .collect();
        let mut out = vec![vec![0.0; 3 * n], vec![0.0; 4 * n], vec![0.0; 3 * n], vec![0.0; n], vec![0.0; 2 * n]];
        for (i, r) in per.into_iter().enumerate() {
            let g = r?;
            out[0][3 * i..3 * i + 3].copy_from_slice(&g.mean.to_array());
            out[1][4 * i..4 * i + 4].copy_from_slice(&g.quat);
            out[2][3 * i..3 * i + 3].copy_from_slice(&g.scale_raw);
            out[3][i] = g.opacity_raw;
            out[4][2 * i] = g.gamma.re;
            out[4][2 * i + 1] = g.gamma.im;
        }
        add_regularizer_grads(&self.shapes, &mut out, grad_act, grad_scales);
        Ok(out)
    }

    fn groups(&self) -> Vec<ParamGroup> {
        vec![
            ParamGroup::new("positions", GroupKind::Position),
            ParamGroup::new("rotations", GroupKind::Standard),
            ParamGroup::new("scale_raw", GroupKind::Standard),
            ParamGroup::new("opacity_raw", GroupKind::Standard),
            ParamGroup::new("gamma", GroupKind::Standard),
        ]
    }

    fn params(&self) -> Vec<&[f64]> {
        let s = &self.shapes;
        vec![&s.means, &s.quats, &s.scale_raw, &s.opacity_raw, &self.gamma]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version.bump();
        let s = &mut self.shapes;
        vec![&mut s.means, &mut s.quats, &mut s.scale_raw, &mut s.opacity_raw, &mut self.gamma]
    }

    fn export(&self) -> (serde_json::Value, Vec<NamedArray>) {
        let n = self.n();
        let s = &self.shapes;
        (
            serde_json::json!({ "config": self.config }),
            vec![
                NamedArray::new("positions", vec![n, 3], s.means.clone()),
                NamedArray::new("rotations", vec![n, 4], s.quats.clone()),
                NamedArray::new("scale_raw", vec![n, 3], s.scale_raw.clone()),
                NamedArray::new("opacity_raw", vec![n], s.opacity_raw.clone()),
                NamedArray::new("gamma", vec![n, 2], self.gamma.clone()),
            ],
        )
    }
}

/// Adds the activation and scale regularizer gradients to groups 3 (opacity) and 2 (scale).
pub(super) fn add_regularizer_grads(s: &SplatShapes, out: &mut [Vec<f64>], grad_act: &[f64], grad_scales: &[f64]) {
    let n = s.len();
    if grad_act.len() == n {
        for i in 0..n {
            let o = sigmoid(s.opacity_raw[i]);
            out[3][i] += grad_act[i] * o * (1.0 - o);
        }
    }
    if grad_scales.len() == 3 * n {
        for k in 0..3 * n {
            out[2][k] += grad_scales[k] * sigmoid(s.scale_raw[k]);
        }
    }
}
