//! Dense networks with hand-written backward passes, plus the attribute and
//! decoder networks built on them.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{encoded_len, positional_encode_backward, positional_encode_into, sigmoid, Complex, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output `y`.
    fn backprop(self, y: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(y, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(y, |g, &v| *g *= 1.0 - v * v),
        }
    }
}

/// `y = act(x W + b)` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and outputs from a forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

/// Gradients in the same layout as [`Mlp::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn flat(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.iter().copied().collect(), b.to_vec()])
            .collect()
    }
}

impl Mlp {
    /// Xavier-uniform weights `U(±√(6/(fan_in+fan_out)))`, zero biases.
    pub fn xavier<R: Rng>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fi, fo) = (w[0], w[1]);
                let a = (6.0 / (fi + fo) as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((fi, fo), |_| rng.gen_range(-a..=a)),
                    bias: Array1::zeros(fo),
                    activation: if l == last { output } else { hidden },
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Self {
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
                activation: if l == last { output } else { hidden },
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.ncols()).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.ncols()));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!("network expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        Ok(())
    }

    pub fn infer(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight) + &l.bias;
            l.activation.apply(&mut z);
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight) + &l.bias;
            l.activation.apply(&mut z);
            inputs.push(h);
            h = z.clone();
            outputs.push(z);
        }
        Ok((h, MlpCache { inputs, outputs }))
    }

    /// Returns parameter gradients and `∂L/∂x`.
    pub fn backward(&self, cache: &MlpCache, grad_out: ArrayView2<f64>) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let rows = cache.inputs[0].nrows();
        if grad_out.dim() != (rows, self.output_dim()) {
            return Err(Error::shape(format!(
                "output gradient is {:?}, expected ({}, {})",
                grad_out.dim(),
                rows,
                self.output_dim()
            )));
        }
        let mut g = grad_out.to_owned();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&cache.outputs[l], &mut g);
            let gw = cache.inputs[l].t().dot(&g);
            let gb = g.sum_axis(Axis(0));
            let gx = g.dot(&layer.weight.t());
            grads.push((gw, gb));
            g = gx;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().expect("standard layout"), l.bias.as_slice().expect("contiguous")])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("contiguous"),
                ]
            })
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    /// Rebuilds a network from its widths, activations and flat parameter slices.
    pub fn from_parts(widths: &[usize], acts: &[Activation], params: &[Vec<f64>]) -> Result<Self> {
        if acts.len() + 1 != widths.len() || params.len() != 2 * acts.len() {
            return Err(Error::Format("network layout does not match its parameters".into()));
        }
        let mut layers = Vec::new();
        for (l, act) in acts.iter().enumerate() {
            let (fi, fo) = (widths[l], widths[l + 1]);
            let weight = Array2::from_shape_vec((fi, fo), params[2 * l].clone())
                .map_err(|e| Error::Format(format!("layer {l} weight: {e}")))?;
            if params[2 * l + 1].len() != fo {
                return Err(Error::Format(format!("layer {l} bias has wrong length")));
            }
            layers.push(Dense { weight, bias: Array1::from(params[2 * l + 1].clone()), activation: *act });
        }
        Ok(Mlp { layers })
    }
}

/// Builds the `N × 2·3·(1+2L)` attribute-network input `γ(μ_i) ⊕ γ(p_tx)`.
pub fn attribute_input(means: &[f64], tx: Vec3, bands: usize) -> Array2<f64> {
    let n = means.len() / 3;
    let e = encoded_len(3, bands);
    let mut tx_enc = vec![0.0; e];
    positional_encode_into(&tx.to_array(), bands, &mut tx_enc);
    let mut x = Array2::zeros((n, 2 * e));
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let row = row.as_slice_mut().expect("row-major");
        positional_encode_into(&means[3 * i..3 * i + 3], bands, &mut row[..e]);
        row[e..].copy_from_slice(&tx_enc);
    }
    x
}

/// Outputs of the attribute network for every Gaussian at one transmitter.
#[derive(Clone, Debug)]
pub struct AttributeOutput {
    /// `N × d_latent`
    pub latents: Array2<f64>,
    pub logits: Vec<f64>,
    /// `sigmoid(logits)`
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AttributeCache {
    mlp: MlpCache,
    means: Vec<f64>,
}

/// Maps `γ(μ) ⊕ γ(p_tx)` to a latent vector and an activation logit per Gaussian.
/// The last layer's final output unit is the logit.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeNet {
    pub mlp: Mlp,
    pub bands: usize,
}

impl AttributeNet {
    pub fn new<R: Rng>(bands: usize, hidden: &[usize], d_latent: usize, rng: &mut R) -> Self {
        let mut widths = vec![2 * encoded_len(3, bands)];
        widths.extend_from_slice(hidden);
        widths.push(d_latent + 1);
        AttributeNet { mlp: Mlp::xavier(&widths, Activation::Relu, Activation::Identity, rng), bands }
    }

    pub fn d_latent(&self) -> usize {
        self.mlp.output_dim() - 1
    }

    fn split(&self, out: Array2<f64>) -> AttributeOutput {
        let d = self.d_latent();
        let logits: Vec<f64> = out.column(d).to_vec();
        let alphas = logits.iter().map(|&v| sigmoid(v)).collect();
        let latents = out.slice(ndarray::s![.., ..d]).to_owned();
        AttributeOutput { latents, logits, alphas }
    }

    pub fn infer(&self, means: &[f64], tx: Vec3) -> Result<AttributeOutput> {
        let x = attribute_input(means, tx, self.bands);
        Ok(self.split(self.mlp.infer(x.view())?))
    }

    pub fn forward(&self, means: &[f64], tx: Vec3) -> Result<(AttributeOutput, AttributeCache)> {
        let x = attribute_input(means, tx, self.bands);
        let (out, mlp) = self.mlp.forward(x.view())?;
        Ok((self.split(out), AttributeCache { mlp, means: means.to_vec() }))
    }

    /// Takes `∂L/∂z` and `∂L/∂α`; returns network gradients and `∂L/∂μ` through the encoding.
    pub fn backward(
        &self,
        cache: &AttributeCache,
        out: &AttributeOutput,
        grad_latents: ArrayView2<f64>,
        grad_alphas: &[f64],
    ) -> Result<(MlpGrads, Vec<f64>)> {
        let n = out.alphas.len();
        let d = self.d_latent();
        if grad_latents.dim() != (n, d) || grad_alphas.len() != n {
            return Err(Error::shape("attribute gradient shapes"));
        }
        let mut g = Array2::zeros((n, d + 1));
        g.slice_mut(ndarray::s![.., ..d]).assign(&grad_latents);
        for i in 0..n {
            let a = out.alphas[i];
            g[[i, d]] = grad_alphas[i] * a * (1.0 - a);
        }
        let (grads, gx) = self.mlp.backward(&cache.mlp, g.view())?;
        let e = encoded_len(3, self.bands);
        let mut g_means = vec![0.0; 3 * n];
        for i in 0..n {
            let row = gx.row(i);
            let row = row.as_slice().expect("row-major");
            positional_encode_backward(&cache.means[3 * i..3 * i + 3], self.bands, &row[..e], &mut g_means[3 * i..3 * i + 3]);
        }
        Ok((grads, g_means))
    }
}

/// Complex contributions `C_i` (`N × N_t × N_r`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelContribution {
    pub n: usize,
    pub nt: usize,
    pub nr: usize,
    pub values: Vec<Complex>,
}

impl ChannelContribution {
    pub fn get(&self, i: usize) -> &[Complex] {
        let k = self.nt * self.nr;
        &self.values[i * k..(i + 1) * k]
    }
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    mlp: MlpCache,
    /// tanh outputs, `N × 2·N_t·N_r`
    raw: Array2<f64>,
}

/// Latent vector to `gain · tanh(…)` with the real parts in the first `N_t·N_r`
/// outputs and the imaginary parts in the second.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
    pub gain: f64,
    pub nt: usize,
    pub nr: usize,
}

impl Decoder {
    pub fn new<R: Rng>(d_latent: usize, hidden: &[usize], nt: usize, nr: usize, rng: &mut R) -> Self {
        let mut widths = vec![d_latent];
        widths.extend_from_slice(hidden);
        widths.push(2 * nt * nr);
        Decoder { mlp: Mlp::xavier(&widths, Activation::Relu, Activation::Tanh, rng), gain: 1.0, nt, nr }
    }

    fn to_contribution(&self, raw: &Array2<f64>) -> ChannelContribution {
        let k = self.nt * self.nr;
        let n = raw.nrows();
        let mut values = Vec::with_capacity(n * k);
        for row in raw.axis_iter(Axis(0)) {
            for j in 0..k {
                values.push(Complex::new(self.gain * row[j], self.gain * row[k + j]));
            }
        }
        ChannelContribution { n, nt: self.nt, nr: self.nr, values }
    }

    pub fn infer(&self, z: ArrayView2<f64>) -> Result<ChannelContribution> {
        Ok(self.to_contribution(&self.mlp.infer(z)?))
    }

    pub fn forward(&self, z: ArrayView2<f64>) -> Result<(ChannelContribution, DecoderCache)> {
        let (raw, mlp) = self.mlp.forward(z)?;
        Ok((self.to_contribution(&raw), DecoderCache { mlp, raw }))
    }

    /// Takes `∂L/∂C` (as `∂L/∂Re + j ∂L/∂Im`); returns network gradients,
    /// `∂L/∂gain` and `∂L/∂z`.
    pub fn backward(&self, cache: &DecoderCache, grad_c: &[Complex]) -> Result<(MlpGrads, f64, Array2<f64>)> {
        let k = self.nt * self.nr;
        let n = cache.raw.nrows();
        if grad_c.len() != n * k {
            return Err(Error::shape("decoder output gradient"));
        }
        let mut g = Array2::zeros((n, 2 * k));
        let mut g_gain = 0.0;
        for i in 0..n {
            for j in 0..k {
                let gc = grad_c[i * k + j];
                g_gain += gc.re * cache.raw[[i, j]] + gc.im * cache.raw[[i, k + j]];
                g[[i, j]] = gc.re * self.gain;
                g[[i, k + j]] = gc.im * self.gain;
            }
        }
        let (grads, gz) = self.mlp.backward(&cache.mlp, g.view())?;
        Ok((grads, g_gain, gz))
    }
}
