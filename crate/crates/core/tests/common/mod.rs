#![allow(dead_code)]

use ngrf_core::antenna::ArraySpec;
use ngrf_core::channel::ChannelMatrix;
use ngrf_core::gaussian::GaussianSet;
use ngrf_core::math::{Aabb, Complex, Mat3, Quaternion, Vec3};
use ngrf_core::model::{FieldModel, Query};
use ngrf_core::networks::{Activation, AttributeNet, Decoder, Mlp};
use ngrf_core::renderer::{contributions, NgrfModel};
use ngrf_core::splat::{Cs1Model, Cs2Model, SplatConfig, SplatShapes};
use ngrf_core::trainer::{loss_with_grad, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec3<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Vec3 {
    Vec3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

pub fn rand_quat<R: Rng>(rng: &mut R) -> Quaternion {
    loop {
        let q = Quaternion::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if q.norm() > 0.3 {
            return q;
        }
    }
}

pub fn rand_channel<R: Rng>(rng: &mut R, nt: usize, nr: usize, scale: f64) -> ChannelMatrix {
    let data = (0..nt * nr).map(|_| Complex::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))).collect();
    ChannelMatrix { nt, nr, data }
}

/// Cofactor inverse, independent of anything in the library.
pub fn inverse3(m: &Mat3) -> Mat3 {
    let a = &m.0;
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (i1, i2) = ((j + 1) % 3, (j + 2) % 3);
            let (j1, j2) = ((i + 1) % 3, (i + 2) % 3);
            r[i][j] = (a[i1][j1] * a[i2][j2] - a[i1][j2] * a[i2][j1]) / det;
        }
    }
    Mat3(r)
}

/// Tiny nGRF model with random Gaussians around the unit cube.
pub fn tiny_ngrf(seed: u64, n: usize, nt: usize, nr: usize) -> NgrfModel {
    let mut r = rng(seed);
    let mut gs = GaussianSet { means: vec![], quats: vec![], log_scales: vec![] };
    for _ in 0..n {
        gs.means.extend(rand_vec3(&mut r, 0.0, 1.0).to_array());
        gs.quats.extend(rand_quat(&mut r).to_array());
        for _ in 0..3 {
            gs.log_scales.push(r.gen_range(0.25f64..0.7).ln());
        }
    }
    let bands = 3;
    let attr = AttributeNet::new(bands, &[12, 12], 6, &mut r);
    let mut decoder = Decoder::new(6, &[10], nt, nr, &mut r);
    decoder.gain = r.gen_range(0.5..1.5);
    // Non-zero biases so every path carries gradient.
    let mut attr = attr;
    for l in attr.mlp.layers.iter_mut().chain(decoder.mlp.layers.iter_mut()) {
        l.bias.mapv_inplace(|_| r.gen_range(-0.1..0.1));
    }
    NgrfModel::from_parts(gs, attr, decoder, r.gen_range(0.5..2.0), 10.0).unwrap()
}

pub fn tiny_splat_config(nt_rows: usize, nt_cols: usize, nr: usize) -> SplatConfig {
    SplatConfig {
        n_gaussians: 0,
        s_init: 0.137,
        carrier_hz: 2.4e8,
        tx_array: ArraySpec::Ura { rows: nt_rows, cols: nt_cols, spacing_lambda: 0.5 },
        rx_array: ArraySpec::Ula { n: nr, spacing_lambda: 0.5 },
    }
}

fn tiny_shapes<R: Rng>(r: &mut R, n: usize) -> SplatShapes {
    let mut s = SplatShapes { means: vec![], quats: vec![], scale_raw: vec![], opacity_raw: vec![] };
    for _ in 0..n {
        s.means.extend(rand_vec3(r, 0.0, 2.0).to_array());
        s.quats.extend(rand_quat(r).to_array());
        for _ in 0..3 {
            s.scale_raw.push(r.gen_range(-0.5..1.0));
        }
        s.opacity_raw.push(r.gen_range(-1.0..1.0));
    }
    s
}

pub fn tiny_cs1(seed: u64, n: usize, rows: usize, cols: usize, nr: usize) -> Cs1Model {
    let mut r = rng(seed);
    let shapes = tiny_shapes(&mut r, n);
    let gamma = (0..2 * n).map(|_| r.gen_range(-1.0..1.0)).collect();
    Cs1Model::from_parts(tiny_splat_config(rows, cols, nr), shapes, gamma).unwrap()
}

pub fn tiny_cs2(seed: u64, n: usize, rows: usize, cols: usize, nr: usize) -> Cs2Model {
    let mut r = rng(seed);
    let shapes = tiny_shapes(&mut r, n);
    let amp = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let phase = (0..n).map(|_| r.gen_range(0.0..6.0)).collect();
    Cs2Model::from_parts(tiny_splat_config(rows, cols, nr), shapes, amp, phase).unwrap()
}

pub fn random_queries<R: Rng>(r: &mut R, b: usize, lo: f64, hi: f64) -> Vec<Query> {
    let tx = rand_vec3(r, lo, hi);
    (0..b).map(|_| Query { tx, rx: rand_vec3(r, lo, hi) }).collect()
}

pub fn total_loss<M: FieldModel>(m: &M, q: &[Query], gt: &[ChannelMatrix], w: &LossWeights) -> f64 {
    let f = m.forward(q).unwrap();
    loss_with_grad(&f.channels, gt, &f.activations, &f.scales, w).unwrap().0.total
}

#[derive(Debug)]
pub struct GroupError {
    pub name: String,
    pub rel: f64,
    pub analytic_norm: f64,
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` per parameter group, with a
/// central difference of step `h·max(1, |θ|)`.
pub fn check_gradients<M: FieldModel>(model: &M, q: &[Query], gt: &[ChannelMatrix], w: &LossWeights, h: f64) -> Vec<GroupError> {
    let f = model.forward(q).unwrap();
    let (_, lg) = loss_with_grad(&f.channels, gt, &f.activations, &f.scales, w).unwrap();
    let analytic = model.backward(&f.cache, &lg.h, &lg.activations, &lg.scales).unwrap();
    let groups = model.groups();
    let mut out = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let len = model.params()[g].len();
        let mut diff = 0.0;
        let mut an = 0.0;
        let mut nn = 0.0;
        for k in 0..len {
            let mut m = model.clone();
            let theta = m.params()[g][k];
            let step = h * theta.abs().max(1.0);
            m.params_mut()[g][k] = theta + step;
            let lp = total_loss(&m, q, gt, w);
            m.params_mut()[g][k] = theta - step;
            let lm = total_loss(&m, q, gt, w);
            let num = (lp - lm) / (2.0 * step);
            let a = analytic[g][k];
            diff += (a - num) * (a - num);
            an += a * a;
            nn += num * num;
        }
        let denom = an.sqrt().max(nn.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        out.push(GroupError { name: group.name.clone(), rel, analytic_norm: an.sqrt() });
    }
    out
}

pub fn bounds(lo: f64, hi: f64) -> Aabb {
    Aabb::new(Vec3::new(lo, lo, lo), Vec3::new(hi, hi, hi))
}

pub fn zero_mlp(widths: &[usize]) -> Mlp {
    Mlp::zeros(widths, Activation::Relu, Activation::Identity)
}

/// Per-Gaussian reference loop: covariance from `R diag(s²) Rᵀ`, inverted by
/// cofactors, weights and sums evaluated one term at a time.
pub fn naive_render(model: &NgrfModel, tx: Vec3, rx: &[Vec3]) -> Vec<ChannelMatrix> {
    let (alphas, contrib) = contributions(model, tx).unwrap();
    let gs = &model.gaussians;
    let (nt, nr) = (contrib.nt, contrib.nr);
    rx.iter()
        .map(|&p| {
            let mut h = ChannelMatrix::zeros(nt, nr);
            for i in 0..gs.len() {
                let r = ngrf_core::math::build_rotation(gs.quat(i)).unwrap();
                let s = gs.scales(i);
                let mut cov = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] = (0..3).map(|k| r.0[a][k] * s[k] * s[k] * r.0[b][k]).sum();
                    }
                }
                let m2 = inverse3(&Mat3(cov)).quad_form(p - gs.mean(i));
                let w = alphas[i] * (-0.5 * m2.min(50.0)).exp();
                for (cell, c) in contrib.get(i).iter().enumerate() {
                    h.data[cell] += c * w;
                }
            }
            h.scaled(model.output_scale)
        })
        .collect()
}

pub fn frobenius_distance(a: &ChannelMatrix, b: &ChannelMatrix) -> f64 {
    a.error_energy(b).unwrap().sqrt()
}
