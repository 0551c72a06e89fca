//! Emitter splatting: every Gaussian radiates a free-space contribution to the
//! receiver, and contributions are alpha-blended front to back in order of
//! Gaussian-to-receiver distance.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::Deserialize;

use super::cs1::add_regularizer_grads;
use super::{footprint, footprint_backward, Footprint, SplatConfig, SplatShapes};
use crate::channel::ChannelMatrix;
use crate::checkpoint::array_map;
use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, softplus_inverse, Aabb, Complex, Mat3};
use crate::model::{FieldModel, Forward, GroupKind, NamedArray, ParamGroup, Query, RendererKind, Revision};
use crate::renderer::take_array;

#[derive(Clone, Debug, PartialEq)]
pub struct Cs2Model {
    pub config: SplatConfig,
    pub shapes: SplatShapes,
    /// Amplitude is `softplus(amp_raw)`.
    pub amp_raw: Vec<f64>,
    pub phase: Vec<f64>,
    version: Revision,
}

struct Splat {
    i: usize,
    fp: Footprint,
    dist: f64,
    base: Complex,
    c: Complex,
    alpha: f64,
}

impl Cs2Model {
    pub fn new(config: SplatConfig, bounds: &Aabb, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplatConfig::rng(seed);
        let n = config.n_gaussians;
        let shapes = SplatShapes::init(n, bounds, config.s_init, &mut rng);
        let phase = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Ok(Cs2Model { config, shapes, amp_raw: vec![softplus_inverse(1.0); n], phase, version: Revision::default() })
    }

    pub fn from_parts(config: SplatConfig, shapes: SplatShapes, amp_raw: Vec<f64>, phase: Vec<f64>) -> Result<Self> {
        shapes.check()?;
        if shapes.is_empty() {
            return Err(Error::EmptyModel);
        }
        if amp_raw.len() != shapes.len() || phase.len() != shapes.len() {
            return Err(Error::shape("amplitude and phase must have N entries"));
        }
        let config = SplatConfig { n_gaussians: shapes.len(), ..config };
        Ok(Cs2Model { config, shapes, amp_raw, phase, version: Revision::default() })
    }

    pub fn n(&self) -> usize {
        self.shapes.len()
    }

    fn geometry(&self) -> Result<Vec<(Mat3, Mat3)>> {
        (0..self.n()).map(|i| self.shapes.covariance(i)).collect()
    }

    /// Visible splats sorted front to back.
    fn splats(&self, q: &Query, geo: &[(Mat3, Mat3)]) -> Vec<Splat> {
        let (nt, nr) = self.dims();
        let lambda = self.config.wavelength();
        let k = 2.0 * PI / lambda;
        let mut out: Vec<Splat> = (0..self.n())
            .filter_map(|i| {
                let mu = self.shapes.mean(i);
                let fp = footprint(mu, q.rx, &geo[i].1, nt, nr)?;
                let dist = fp.d.norm();
                let base = Complex::from_polar(lambda / (4.0 * PI * dist), self.phase[i] - k * dist);
                let c = base * softplus(self.amp_raw[i]);
                Some(Splat { i, fp, dist, base, c, alpha: self.shapes.opacity(i) })
            })
            .collect();
        out.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.i.cmp(&b.i)));
        out
    }

    fn render_one(&self, q: &Query, geo: &[(Mat3, Mat3)]) -> ChannelMatrix {
        let (nt, nr) = self.dims();
        let splats = self.splats(q, geo);
        let mut h = ChannelMatrix::zeros(nt, nr);
        for (cell, out) in h.data.iter_mut().enumerate() {
            let mut trans = 1.0;
            for s in &splats {
                let e = s.alpha * s.fp.sigma[cell];
                *out += s.c * (e * trans);
                trans *= 1.0 - e;
            }
        }
        h
    }

    /// Flat per-query gradient for all six groups.
    fn backward_one(&self, q: &Query, g: &ChannelMatrix, geo: &[(Mat3, Mat3)]) -> Result<Vec<Vec<f64>>> {
        let (nt, nr) = self.dims();
        let n = self.n();
        let k = 2.0 * PI / self.config.wavelength();
        let splats = self.splats(q, geo);
        let m = splats.len();
        let mut g_sigma = vec![vec![0.0; nt * nr]; m];
        let mut g_alpha = vec![0.0; m];
        let mut g_c = vec![Complex::new(0.0, 0.0); m];
        let mut trans = vec![0.0; m];
        for cell in 0..nt * nr {
            let gc = g.data[cell];
            let mut t = 1.0;
            for (p, s) in splats.iter().enumerate() {
                trans[p] = t;
                t *= 1.0 - s.alpha * s.fp.sigma[cell];
            }
            // Reverse walk carrying ∂L/∂T_{p+1}.
            let mut g_next = 0.0;
            for p in (0..m).rev() {
                let s = &splats[p];
                let e = s.alpha * s.fp.sigma[cell];
                let gdot = gc.re * s.c.re + gc.im * s.c.im;
                let g_e = trans[p] * gdot - trans[p] * g_next;
                g_c[p] += gc * (e * trans[p]);
                g_next = e * gdot + g_next * (1.0 - e);
                g_sigma[p][cell] = g_e * s.alpha;
                g_alpha[p] += g_e * s.fp.sigma[cell];
            }
        }
        let mut out = vec![vec![0.0; 3 * n], vec![0.0; 4 * n], vec![0.0; 3 * n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (p, s) in splats.iter().enumerate() {
            let i = s.i;
            let (g_d, g_cov) = footprint_backward(&s.fp, &geo[i].1, &g_sigma[p], nt, nr);
            let (g_q, g_s) = self.shapes.covariance_backward(i, &geo[i].0, &g_cov)?;
            let gc = g_c[p];
            let g_r = (gc.conj() * s.c * Complex::new(-1.0 / s.dist, -k)).re;
            let g_mu = g_d + s.fp.d * (g_r / s.dist);
            out[0][3 * i..3 * i + 3].copy_from_slice(&g_mu.to_array());
            out[1][4 * i..4 * i + 4].copy_from_slice(&g_q);
            out[2][3 * i..3 * i + 3].copy_from_slice(&g_s);
            out[3][i] = g_alpha[p] * s.alpha * (1.0 - s.alpha);
            out[4][i] = (gc.conj() * s.base).re * sigmoid(self.amp_raw[i]);
            out[5][i] = (gc.conj() * Complex::i() * s.c).re;
        }
        Ok(out)
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
        Cs2Model::from_parts(h.config, shapes, take_array(&mut map, "amp_raw")?, take_array(&mut map, "phase")?)
    }
}

pub struct Cs2Cache {
    version: u64,
    queries: Vec<Query>,
}

impl FieldModel for Cs2Model {
    type Cache = Cs2Cache;

    fn kind(&self) -> RendererKind {
        RendererKind::Cs2
    }

    fn dims(&self) -> (usize, usize) {
        (self.config.tx_array.len(), self.config.rx_array.len())
    }

    fn forward(&self, queries: &[Query]) -> Result<Forward<Cs2Cache>> {
        Ok(Forward {
            channels: self.predict(queries)?,
            activations: self.shapes.all_opacities(),
            scales: self.shapes.all_scales(),
            cache: Cs2Cache { version: self.version.get(), queries: queries.to_vec() },
        })
    }

    fn predict(&self, queries: &[Query]) -> Result<Vec<ChannelMatrix>> {
        let geo = self.geometry()?;
        Ok(queries.par_iter().map(|q| self.render_one(q, &geo)).collect())
    }

    fn backward(&self, cache: &Cs2Cache, grad_h: &[ChannelMatrix], grad_act: &[f64], grad_scales: &[f64]) -> Result<Vec<Vec<f64>>> {
        if cache.version != self.version.get() {
            return Err(Error::StaleCache);
        }
        if grad_h.len() != cache.queries.len() || grad_h.iter().any(|g| g.dims() != self.dims()) {
            return Err(Error::shape("grad_h does not match the cached batch"));
        }
        let geo = self.geometry()?;
        let per: Vec<Result<Vec<Vec<f64>>>> =
            cache.queries.par_iter().zip(grad_h).map(|(q, g)| self.backward_one(q, g, &geo)).collect();
        let mut total: Option<Vec<Vec<f64>>> = None;
        for r in per {
            let g = r?;
            match &mut total {
                None => total = Some(g),
                Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
            }
        }
        let mut out = total.ok_or(Error::EmptyDataset)?;
        add_regularizer_grads(&self.shapes, &mut out, grad_act, grad_scales);
        Ok(out)
    }

    fn groups(&self) -> Vec<ParamGroup> {
        vec![
            ParamGroup::new("positions", GroupKind::Position),
            ParamGroup::new("rotations", GroupKind::Standard),
            ParamGroup::new("scale_raw", GroupKind::Standard),
            ParamGroup::new("opacity_raw", GroupKind::Standard),
            ParamGroup::new("amp_raw", GroupKind::Standard),
            ParamGroup::new("phase", GroupKind::Standard),
        ]
    }

    fn params(&self) -> Vec<&[f64]> {
        let s = &self.shapes;
        vec![&s.means, &s.quats, &s.scale_raw, &s.opacity_raw, &self.amp_raw, &self.phase]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version.bump();
        let s = &mut self.shapes;
        vec![&mut s.means, &mut s.quats, &mut s.scale_raw, &mut s.opacity_raw, &mut self.amp_raw, &mut self.phase]
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
                NamedArray::new("amp_raw", vec![n], self.amp_raw.clone()),
                NamedArray::new("phase", vec![n], self.phase.clone()),
            ],
        )
    }
}
