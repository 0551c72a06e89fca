//! Reference predictors: inverse-distance KNN and a position-encoded MLP.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::channel::ChannelMatrix;
use crate::checkpoint::array_map;
use crate::dataset::Measurement;
use crate::error::{Error, Result};
use crate::math::{encoded_len, positional_encode_into, Complex, Vec3};
use crate::model::{FieldModel, Forward, GroupKind, NamedArray, ParamGroup, Query, RendererKind, Revision};
use crate::networks::{Activation, Decoder, DecoderCache, Mlp};
use crate::renderer::{mlp_arrays, scalar, take_mlp, MlpLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnWeighting {
    InverseDistance,
    Uniform,
}

/// Added to distances before inverting them.
pub const KNN_EPS: f64 = 1e-9;

/// Nearest neighbours in receiver position.
#[derive(Clone, Debug)]
pub struct KnnModel {
    points: Vec<Measurement>,
    pub k: usize,
    pub weighting: KnnWeighting,
}

impl KnnModel {
    pub fn new(points: Vec<Measurement>, k: usize, weighting: KnnWeighting) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if k == 0 || k > points.len() {
            return Err(Error::InvalidArgument(format!("k must be in 1..={}, got {k}", points.len())));
        }
        Ok(KnnModel { points, k, weighting })
    }

    pub fn predict(&self, rx: Vec3) -> ChannelMatrix {
        // Ties are broken by position so the result does not depend on storage order.
        let mut d: Vec<(f64, usize)> = self.points.iter().enumerate().map(|(i, m)| (m.rx.distance(rx), i)).collect();
        d.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                let (p, q) = (self.points[a.1].rx.to_array(), self.points[b.1].rx.to_array());
                p.iter().zip(&q).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        if d[0].0 == 0.0 {
            return self.points[d[0].1].h.clone();
        }
        let first = &self.points[d[0].1].h;
        let mut acc = vec![Complex::new(0.0, 0.0); first.data.len()];
        let mut wsum = 0.0;
        for &(dist, i) in d.iter().take(self.k) {
            let w = match self.weighting {
                KnnWeighting::InverseDistance => 1.0 / (dist + KNN_EPS),
                KnnWeighting::Uniform => 1.0,
            };
            wsum += w;
            for (a, h) in acc.iter_mut().zip(&self.points[i].h.data) {
                *a += h * w;
            }
        }
        acc.iter_mut().for_each(|a| *a /= wsum);
        ChannelMatrix { nt: first.nt, nr: first.nr, data: acc }
    }

    pub fn predict_batch(&self, rx: &[Vec3]) -> Vec<ChannelMatrix> {
        rx.iter().map(|&p| self.predict(p)).collect()
    }
}

/// MLP from `γ(p_rx) ⊕ γ(p_tx)` straight to the channel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBaseline {
    /// Reuses the decoder head: `gain · tanh(…)`, real parts first.
    pub net: Decoder,
    pub bands: usize,
    pub output_scale: f64,
    version: Revision,
}

impl MlpBaseline {
    pub fn new(nt: usize, nr: usize, bands: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![2 * encoded_len(3, bands)];
        widths.extend_from_slice(hidden);
        widths.push(2 * nt * nr);
        let mlp = Mlp::xavier(&widths, Activation::Relu, Activation::Tanh, &mut rng);
        MlpBaseline { net: Decoder { mlp, gain: 1.0, nt, nr }, bands, output_scale: 1.0, version: Revision::default() }
    }

    /// All weights and the gain set to zero.
    pub fn zeroed(mut self) -> Self {
        for p in self.net.mlp.param_slices_mut() {
            p.fill(0.0);
        }
        self.net.gain = 0.0;
        self
    }

    fn inputs(&self, queries: &[Query]) -> Array2<f64> {
        let e = encoded_len(3, self.bands);
        let mut x = Array2::zeros((queries.len(), 2 * e));
        for (q, mut row) in queries.iter().zip(x.rows_mut()) {
            let row = row.as_slice_mut().expect("row-major");
            positional_encode_into(&q.rx.to_array(), self.bands, &mut row[..e]);
            positional_encode_into(&q.tx.to_array(), self.bands, &mut row[e..]);
        }
        x
    }

    fn to_channels(&self, c: crate::networks::ChannelContribution) -> Vec<ChannelMatrix> {
        let k = c.nt * c.nr;
        c.values
            .chunks(k)
            .map(|v| ChannelMatrix { nt: c.nt, nr: c.nr, data: v.iter().map(|z| z * self.output_scale).collect() })
            .collect()
    }

    pub fn import(header: &serde_json::Value, arrays: Vec<NamedArray>) -> Result<Self> {
        #[derive(Deserialize)]
        struct H {
            nt: usize,
            nr: usize,
            bands: usize,
            network: MlpLayout,
        }
        let h: H = serde_json::from_value(header.clone())?;
        let mut map = array_map(arrays);
        let mlp = take_mlp(&mut map, "network", &h.network)?;
        if mlp.input_dim() != 2 * encoded_len(3, h.bands) || mlp.output_dim() != 2 * h.nt * h.nr {
            return Err(Error::Format("baseline network shape does not match its header".into()));
        }
        Ok(MlpBaseline {
            net: Decoder { mlp, gain: scalar(&mut map, "gain")?, nt: h.nt, nr: h.nr },
            bands: h.bands,
            output_scale: scalar(&mut map, "output_scale")?,
            version: Revision::default(),
        })
    }
}

pub struct MlpBaselineCache {
    version: u64,
    dec: DecoderCache,
}

impl FieldModel for MlpBaseline {
    type Cache = MlpBaselineCache;

    fn kind(&self) -> RendererKind {
        RendererKind::Mlp
    }

    fn dims(&self) -> (usize, usize) {
        (self.net.nt, self.net.nr)
    }

    fn forward(&self, queries: &[Query]) -> Result<Forward<MlpBaselineCache>> {
        let x = self.inputs(queries);
        let (c, dec) = self.net.forward(x.view())?;
        Ok(Forward {
            channels: self.to_channels(c),
            activations: Vec::new(),
            scales: Vec::new(),
            cache: MlpBaselineCache { version: self.version.get(), dec },
        })
    }

    fn predict(&self, queries: &[Query]) -> Result<Vec<ChannelMatrix>> {
        Ok(self.to_channels(self.net.infer(self.inputs(queries).view())?))
    }

    fn backward(&self, cache: &MlpBaselineCache, grad_h: &[ChannelMatrix], _: &[f64], _: &[f64]) -> Result<Vec<Vec<f64>>> {
        if cache.version != self.version.get() {
            return Err(Error::StaleCache);
        }
        let g: Vec<Complex> = grad_h.iter().flat_map(|m| m.data.iter().map(|z| z * self.output_scale)).collect();
        let (grads, g_gain, _) = self.net.backward(&cache.dec, &g)?;
        let mut out = grads.flat();
        out.push(vec![g_gain]);
        Ok(out)
    }

    fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = (0..self.net.mlp.layers.len())
            .flat_map(|l| {
                [
                    ParamGroup::new(format!("network.{l}.weight"), GroupKind::Standard),
                    ParamGroup::new(format!("network.{l}.bias"), GroupKind::Standard),
                ]
            })
            .collect();
        g.push(ParamGroup::new("gain", GroupKind::Standard));
        g
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.net.mlp.param_slices();
        p.push(std::slice::from_ref(&self.net.gain));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version.bump();
        let mut p = self.net.mlp.param_slices_mut();
        p.push(std::slice::from_mut(&mut self.net.gain));
        p
    }

    fn set_output_scale(&mut self, scale: f64) {
        self.output_scale = scale;
        self.version.bump();
    }

    fn export(&self) -> (serde_json::Value, Vec<NamedArray>) {
        let header = serde_json::json!({
            "nt": self.net.nt,
            "nr": self.net.nr,
            "bands": self.bands,
            "network": { "widths": self.net.mlp.widths(), "activations": self.net.mlp.activations() },
        });
        let mut arrays = mlp_arrays("network", &self.net.mlp);
        arrays.push(NamedArray::new("gain", vec![1], vec![self.net.gain]));
        arrays.push(NamedArray::new("output_scale", vec![1], vec![self.output_scale]));
        (header, arrays)
    }
}
