//! The Gaussian radio field model: `H_b = Σ_i w_bi C_i`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::gaussian::{
    spatial_weights_backward_with, spatial_weights_with, GaussianGeometry, GaussianSet, SpatialWeights,
};
use crate::math::{Aabb, Complex, Vec3};
use crate::model::{group_by_tx, FieldModel, Forward, GroupKind, NamedArray, ParamGroup, Query, RendererKind, Revision};
use crate::networks::{
    Activation, AttributeCache, AttributeNet, AttributeOutput, ChannelContribution, Decoder, DecoderCache, Mlp,
    MlpGrads,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgrfConfig {
    pub n_gaussians: usize,
    pub d_latent: usize,
    pub bands: usize,
    pub attr_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub s_init: f64,
}

impl Default for NgrfConfig {
    fn default() -> Self {
        NgrfConfig {
            n_gaussians: 1000,
            d_latent: 64,
            bands: 16,
            attr_hidden: vec![256; 4],
            decoder_hidden: vec![128; 2],
            s_init: 0.137,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgrfModel {
    pub config: NgrfConfig,
    pub gaussians: GaussianSet,
    pub attr: AttributeNet,
    pub decoder: Decoder,
    /// Fixed multiplier on rendered channels, so the networks work at unit scale.
    pub output_scale: f64,
    /// Upper clamp on every scale (the scene diagonal).
    pub max_scale: f64,
    version: Revision,
}

impl NgrfModel {
    pub fn new(config: NgrfConfig, nt: usize, nr: usize, bounds: &Aabb, seed: u64) -> Result<Self> {
        if config.n_gaussians == 0 {
            return Err(Error::EmptyModel);
        }
        if nt == 0 || nr == 0 {
            return Err(Error::InvalidArgument("antenna counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussians = GaussianSet::init(config.n_gaussians, bounds, config.s_init, &mut rng);
        let attr = AttributeNet::new(config.bands, &config.attr_hidden, config.d_latent, &mut rng);
        let decoder = Decoder::new(config.d_latent, &config.decoder_hidden, nt, nr, &mut rng);
        Ok(NgrfModel { config, gaussians, attr, decoder, output_scale: 1.0, max_scale: bounds.diagonal(), version: Revision::default() })
    }

    /// Assembles a model from parts; the configuration is taken from the parts' shapes.
    pub fn from_parts(gaussians: GaussianSet, attr: AttributeNet, decoder: Decoder, output_scale: f64, max_scale: f64) -> Result<Self> {
        gaussians.check()?;
        if gaussians.is_empty() {
            return Err(Error::EmptyModel);
        }
        if attr.mlp.output_dim() != decoder.mlp.input_dim() + 1 {
            return Err(Error::shape("attribute latent width does not match the decoder input"));
        }
        let widths = attr.mlp.widths();
        let dw = decoder.mlp.widths();
        let config = NgrfConfig {
            n_gaussians: gaussians.len(),
            d_latent: decoder.mlp.input_dim(),
            bands: attr.bands,
            attr_hidden: widths[1..widths.len() - 1].to_vec(),
            decoder_hidden: dw[1..dw.len() - 1].to_vec(),
            s_init: NgrfConfig::default().s_init,
        };
        Ok(NgrfModel { config, gaussians, attr, decoder, output_scale, max_scale, version: Revision::default() })
    }

    pub fn n(&self) -> usize {
        self.gaussians.len()
    }

    /// Per-transmitter state reused across any number of receivers.
    pub fn prepare(&self, tx: Vec3) -> Result<TxContext> {
        let attr = self.attr.infer(&self.gaussians.means, tx)?;
        let contrib = self.decoder.infer(attr.latents.view())?;
        let geometry = self.gaussians.geometry()?;
        Ok(TxContext { tx, alphas: attr.alphas, contrib, geometry })
    }

    pub fn render_prepared(&self, ctx: &TxContext, rx: &[Vec3]) -> Result<Vec<ChannelMatrix>> {
        let alphas = broadcast(&ctx.alphas, rx.len());
        let weights = spatial_weights_with(&self.gaussians, &ctx.geometry, &alphas, rx)?;
        Ok(accumulate(&weights, &ctx.contrib, self.output_scale))
    }

    pub fn render_inference(&self, tx: Vec3, rx: &[Vec3]) -> Result<Vec<ChannelMatrix>> {
        let ctx = self.prepare(tx)?;
        self.render_prepared(&ctx, rx)
    }
}

/// Attribute and decoder outputs for one transmitter.
#[derive(Clone, Debug)]
pub struct TxContext {
    pub tx: Vec3,
    pub alphas: Vec<f64>,
    pub contrib: ChannelContribution,
    pub geometry: Vec<GaussianGeometry>,
}

fn broadcast(alphas: &[f64], batch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(alphas.len() * batch);
    for _ in 0..batch {
        out.extend_from_slice(alphas);
    }
    out
}

/// Sums in Gaussian index order within each receiver, so results do not depend
/// on the thread count.
fn accumulate(weights: &SpatialWeights, contrib: &ChannelContribution, scale: f64) -> Vec<ChannelMatrix> {
    let k = contrib.nt * contrib.nr;
    (0..weights.batch)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![Complex::new(0.0, 0.0); k];
            for (i, &w) in weights.row(b).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (a, c) in acc.iter_mut().zip(contrib.get(i)) {
                    *a += c * w;
                }
            }
            acc.iter_mut().for_each(|a| *a *= scale);
            ChannelMatrix { nt: contrib.nt, nr: contrib.nr, data: acc }
        })
        .collect()
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct RenderCache {
    version: u64,
    rx: Vec<Vec3>,
    attr_out: AttributeOutput,
    attr_cache: AttributeCache,
    dec_cache: DecoderCache,
    contrib: ChannelContribution,
    geometry: Vec<GaussianGeometry>,
    alphas: Vec<f64>,
    weights: SpatialWeights,
}

impl RenderCache {
    pub fn alphas(&self) -> &[f64] {
        &self.attr_out.alphas
    }
    pub fn weights(&self) -> &SpatialWeights {
        &self.weights
    }
    pub fn contributions(&self) -> &ChannelContribution {
        &self.contrib
    }
}

pub fn render(model: &NgrfModel, tx: Vec3, rx: &[Vec3]) -> Result<(Vec<ChannelMatrix>, RenderCache)> {
    let (attr_out, attr_cache) = model.attr.forward(&model.gaussians.means, tx)?;
    let (contrib, dec_cache) = model.decoder.forward(attr_out.latents.view())?;
    let geometry = model.gaussians.geometry()?;
    let alphas = broadcast(&attr_out.alphas, rx.len());
    let weights = spatial_weights_with(&model.gaussians, &geometry, &alphas, rx)?;
    let h = accumulate(&weights, &contrib, model.output_scale);
    let cache = RenderCache {
        version: model.version.get(),
        rx: rx.to_vec(),
        attr_out,
        attr_cache,
        dec_cache,
        contrib,
        geometry,
        alphas,
        weights,
    };
    Ok((h, cache))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgrfGrads {
    pub means: Vec<f64>,
    pub quats: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub attr: MlpGrads,
    pub decoder: MlpGrads,
    pub gain: f64,
}

impl NgrfGrads {
    /// Flattened in [`FieldModel::groups`] order.
    pub fn flat(self) -> Vec<Vec<f64>> {
        let mut v = vec![self.means, self.quats, self.log_scales];
        v.extend(self.attr.flat());
        v.extend(self.decoder.flat());
        v.push(vec![self.gain]);
        v
    }
}

pub fn render_backward(model: &NgrfModel, cache: &RenderCache, grad_h: &[ChannelMatrix]) -> Result<NgrfGrads> {
    render_backward_with(model, cache, grad_h, None)
}

/// As [`render_backward`], with an extra `∂L/∂α_i` added before the attribute network.
pub fn render_backward_with(
    model: &NgrfModel,
    cache: &RenderCache,
    grad_h: &[ChannelMatrix],
    grad_alpha: Option<&[f64]>,
) -> Result<NgrfGrads> {
    if cache.version != model.version.get() || cache.contrib.n != model.n() {
        return Err(Error::StaleCache);
    }
    let (n, batch) = (model.n(), cache.rx.len());
    let (nt, nr) = (model.decoder.nt, model.decoder.nr);
    let k = nt * nr;
    if grad_h.len() != batch || grad_h.iter().any(|g| g.dims() != (nt, nr)) {
        return Err(Error::shape(format!("grad_h must be {batch} matrices of {nt}x{nr}")));
    }
    let s = model.output_scale;

    // ∂L/∂w_bi = s·Re Σ G* C
    let mut grad_w = vec![0.0; batch * n];
    grad_w.par_chunks_mut(n.max(1)).enumerate().for_each(|(b, row)| {
        let g = &grad_h[b].data;
        for (i, gw) in row.iter_mut().enumerate() {
            let c = cache.contrib.get(i);
            let mut acc = 0.0;
            for j in 0..k {
                acc += g[j].re * c[j].re + g[j].im * c[j].im;
            }
            *gw = s * acc;
        }
    });

    // ∂L/∂C_i = s Σ_b w_bi G_b
    let mut grad_c = vec![Complex::new(0.0, 0.0); n * k];
    grad_c.par_chunks_mut(k).enumerate().for_each(|(i, gc)| {
        for b in 0..batch {
            let w = cache.weights.w[b * n + i];
            if w == 0.0 {
                continue;
            }
            for (a, g) in gc.iter_mut().zip(&grad_h[b].data) {
                *a += g * (w * s);
            }
        }
    });

    let gg = spatial_weights_backward_with(
        &model.gaussians,
        &cache.geometry,
        &cache.alphas,
        &cache.rx,
        &cache.weights,
        &grad_w,
    )?;

    let mut g_alpha = vec![0.0; n];
    for b in 0..batch {
        for i in 0..n {
            g_alpha[i] += gg.alphas[b * n + i];
        }
    }
    if let Some(extra) = grad_alpha {
        if extra.len() != n {
            return Err(Error::shape("extra alpha gradient must have N entries"));
        }
        g_alpha.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
    }

    let (dec_grads, g_gain, g_z) = model.decoder.backward(&cache.dec_cache, &grad_c)?;
    let (attr_grads, g_means_enc) = model.attr.backward(&cache.attr_cache, &cache.attr_out, g_z.view(), &g_alpha)?;

    let means = gg.means.iter().zip(&g_means_enc).map(|(a, b)| a + b).collect();
    Ok(NgrfGrads {
        means,
        quats: gg.quats,
        log_scales: gg.log_scales,
        attr: attr_grads,
        decoder: dec_grads,
        gain: g_gain,
    })
}

pub struct NgrfCache {
    groups: Vec<(Vec<usize>, RenderCache)>,
    batch: usize,
}

impl FieldModel for NgrfModel {
    type Cache = NgrfCache;

    fn kind(&self) -> RendererKind {
        RendererKind::Ngrf
    }

    fn dims(&self) -> (usize, usize) {
        (self.decoder.nt, self.decoder.nr)
    }

    fn forward(&self, queries: &[Query]) -> Result<Forward<NgrfCache>> {
        let (nt, nr) = self.dims();
        let mut channels = vec![ChannelMatrix::zeros(nt, nr); queries.len()];
        let mut activations = vec![0.0; self.n()];
        let mut groups = Vec::new();
        for (tx, idx) in group_by_tx(queries) {
            let rx: Vec<Vec3> = idx.iter().map(|&k| queries[k].rx).collect();
            let (h, cache) = render(self, tx, &rx)?;
            let share = idx.len() as f64 / queries.len() as f64;
            for (a, &v) in activations.iter_mut().zip(cache.alphas()) {
                *a += share * v;
            }
            for (&k, hk) in idx.iter().zip(h) {
                channels[k] = hk;
            }
            groups.push((idx, cache));
        }
        let scales = self.gaussians.log_scales.iter().map(|v| v.exp()).collect();
        Ok(Forward { channels, activations, scales, cache: NgrfCache { groups, batch: queries.len() } })
    }

    fn predict(&self, queries: &[Query]) -> Result<Vec<ChannelMatrix>> {
        let (nt, nr) = self.dims();
        let mut out = vec![ChannelMatrix::zeros(nt, nr); queries.len()];
        for (tx, idx) in group_by_tx(queries) {
            let rx: Vec<Vec3> = idx.iter().map(|&k| queries[k].rx).collect();
            for (&k, h) in idx.iter().zip(self.render_inference(tx, &rx)?) {
                out[k] = h;
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        cache: &NgrfCache,
        grad_h: &[ChannelMatrix],
        grad_activations: &[f64],
        grad_scales: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        if grad_h.len() != cache.batch {
            return Err(Error::shape("grad_h batch size"));
        }
        let n = self.n();
        let mut total: Option<Vec<Vec<f64>>> = None;
        for (idx, rc) in &cache.groups {
            let gh: Vec<ChannelMatrix> = idx.iter().map(|&k| grad_h[k].clone()).collect();
            let share = idx.len() as f64 / cache.batch as f64;
            let extra: Option<Vec<f64>> =
                (grad_activations.len() == n).then(|| grad_activations.iter().map(|g| g * share).collect());
            let g = render_backward_with(self, rc, &gh, extra.as_deref())?.flat();
            match &mut total {
                None => total = Some(g),
                Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
            }
        }
        let mut total = total.ok_or(Error::EmptyDataset)?;
        if grad_scales.len() == 3 * n {
            for (k, g) in total[2].iter_mut().enumerate() {
                *g += grad_scales[k] * self.gaussians.log_scales[k].exp();
            }
        }
        Ok(total)
    }

    fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![
            ParamGroup::new("positions", GroupKind::Position),
            ParamGroup::new("rotations", GroupKind::Standard),
            ParamGroup::new("log_scales", GroupKind::Standard),
        ];
        for (prefix, mlp) in [("attribute", &self.attr.mlp), ("decoder", &self.decoder.mlp)] {
            for l in 0..mlp.layers.len() {
                g.push(ParamGroup::new(format!("{prefix}.{l}.weight"), GroupKind::Standard));
                g.push(ParamGroup::new(format!("{prefix}.{l}.bias"), GroupKind::Standard));
            }
        }
        g.push(ParamGroup::new("decoder.gain", GroupKind::Standard));
        g
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p: Vec<&[f64]> = vec![&self.gaussians.means, &self.gaussians.quats, &self.gaussians.log_scales];
        p.extend(self.attr.mlp.param_slices());
        p.extend(self.decoder.mlp.param_slices());
        p.push(std::slice::from_ref(&self.decoder.gain));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version.bump();
        let mut p: Vec<&mut [f64]> =
            vec![&mut self.gaussians.means, &mut self.gaussians.quats, &mut self.gaussians.log_scales];
        p.extend(self.attr.mlp.param_slices_mut());
        p.extend(self.decoder.mlp.param_slices_mut());
        p.push(std::slice::from_mut(&mut self.decoder.gain));
        p
    }

    fn after_step(&mut self) {
        self.gaussians.clamp_scales(self.max_scale);
    }

    fn set_output_scale(&mut self, scale: f64) {
        self.output_scale = scale;
        self.version.bump();
    }

    fn export(&self) -> (serde_json::Value, Vec<NamedArray>) {
        let n = self.n();
        let header = serde_json::json!({
            "config": self.config,
            "nt": self.decoder.nt,
            "nr": self.decoder.nr,
            "attribute": { "widths": self.attr.mlp.widths(), "activations": self.attr.mlp.activations() },
            "decoder": { "widths": self.decoder.mlp.widths(), "activations": self.decoder.mlp.activations() },
        });
        let mut arrays = vec![
            NamedArray::new("positions", vec![n, 3], self.gaussians.means.clone()),
            NamedArray::new("rotations", vec![n, 4], self.gaussians.quats.clone()),
            NamedArray::new("log_scales", vec![n, 3], self.gaussians.log_scales.clone()),
        ];
        arrays.extend(mlp_arrays("attribute", &self.attr.mlp));
        arrays.extend(mlp_arrays("decoder", &self.decoder.mlp));
        arrays.push(NamedArray::new("decoder.gain", vec![1], vec![self.decoder.gain]));
        arrays.push(NamedArray::new("output_scale", vec![1], vec![self.output_scale]));
        arrays.push(NamedArray::new("max_scale", vec![1], vec![self.max_scale]));
        (header, arrays)
    }
}

pub(crate) fn mlp_arrays(prefix: &str, mlp: &Mlp) -> Vec<NamedArray> {
    mlp.layers
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            [
                NamedArray::new(format!("{prefix}.{l}.weight"), layer.weight.shape().to_vec(), layer.weight.iter().copied().collect()),
                NamedArray::new(format!("{prefix}.{l}.bias"), vec![layer.bias.len()], layer.bias.to_vec()),
            ]
        })
        .collect()
}

#[derive(Deserialize)]
pub(crate) struct MlpLayout {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

pub(crate) fn take_array(arrays: &mut std::collections::HashMap<String, NamedArray>, name: &str) -> Result<Vec<f64>> {
    arrays.remove(name).map(|a| a.data).ok_or_else(|| Error::Format(format!("missing array `{name}`")))
}

pub(crate) fn take_mlp(
    arrays: &mut std::collections::HashMap<String, NamedArray>,
    prefix: &str,
    layout: &MlpLayout,
) -> Result<Mlp> {
    let params = (0..layout.activations.len())
        .flat_map(|l| [format!("{prefix}.{l}.weight"), format!("{prefix}.{l}.bias")])
        .map(|name| take_array(arrays, &name))
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_parts(&layout.widths, &layout.activations, &params)
}

impl NgrfModel {
    pub fn import(header: &serde_json::Value, arrays: Vec<NamedArray>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            config: NgrfConfig,
            nt: usize,
            nr: usize,
            attribute: MlpLayout,
            decoder: MlpLayout,
        }
        let h: Header = serde_json::from_value(header.clone())?;
        let mut map: std::collections::HashMap<_, _> = arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
        let gaussians = GaussianSet {
            means: take_array(&mut map, "positions")?,
            quats: take_array(&mut map, "rotations")?,
            log_scales: take_array(&mut map, "log_scales")?,
        };
        gaussians.check()?;
        let attr = AttributeNet { mlp: take_mlp(&mut map, "attribute", &h.attribute)?, bands: h.config.bands };
        let decoder = Decoder {
            mlp: take_mlp(&mut map, "decoder", &h.decoder)?,
            gain: scalar(&mut map, "decoder.gain")?,
            nt: h.nt,
            nr: h.nr,
        };
        Ok(NgrfModel {
            config: h.config,
            gaussians,
            attr,
            decoder,
            output_scale: scalar(&mut map, "output_scale")?,
            max_scale: scalar(&mut map, "max_scale")?,
            version: Revision::default(),
        })
    }
}

pub(crate) fn scalar(arrays: &mut std::collections::HashMap<String, NamedArray>, name: &str) -> Result<f64> {
    take_array(arrays, name)?
        .first()
        .copied()
        .ok_or_else(|| Error::Format(format!("array `{name}` is empty")))
}

/// Latency distribution in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub repeats: usize,
    pub batch: usize,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub mean_ms: Option<f64>,
}

/// Times [`NgrfModel::render_prepared`] on `batch` random receivers with the
/// transmitter state already computed.
pub fn predict_latency_bench(model: &NgrfModel, tx: Vec3, bounds: &Aabb, batch: usize, repeats: usize) -> Result<LatencyStats> {
    let ctx = model.prepare(tx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let mut rx = || -> Vec<Vec3> {
        (0..batch)
            .map(|_| {
                let e = bounds.extent();
                bounds.min + Vec3::new(rng.gen::<f64>() * e.x, rng.gen::<f64>() * e.y, rng.gen::<f64>() * e.z)
            })
            .collect()
    };
    // Warm-up
    model.render_prepared(&ctx, &rx())?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let pts = rx();
        let t0 = Instant::now();
        let h = model.render_prepared(&ctx, &pts)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(h);
    }
    Ok(latency_stats(&mut times, batch))
}

pub fn latency_stats(times_ms: &mut [f64], batch: usize) -> LatencyStats {
    let repeats = times_ms.len();
    if repeats == 0 {
        return LatencyStats { repeats, batch, p50_ms: None, p95_ms: None, p99_ms: None, mean_ms: None };
    }
    times_ms.sort_by(f64::total_cmp);
    let pct = |p: f64| times_ms[((p * (repeats - 1) as f64).round() as usize).min(repeats - 1)];
    LatencyStats {
        repeats,
        batch,
        p50_ms: Some(pct(0.5)),
        p95_ms: Some(pct(0.95)),
        p99_ms: Some(pct(0.99)),
        mean_ms: Some(times_ms.iter().sum::<f64>() / repeats as f64),
    }
}

/// Per-Gaussian activations and decoder contributions for one transmitter.
pub fn contributions(model: &NgrfModel, tx: Vec3) -> Result<(Vec<f64>, ChannelContribution)> {
    let ctx = model.prepare(tx)?;
    Ok((ctx.alphas, ctx.contrib))
}
