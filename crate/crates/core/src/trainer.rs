//! Losses, SNR, the optimizer and the training loop shared by every model.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::dataset::Measurement;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::model::{FieldModel, GroupKind, Query};

/// SNR reported for an exact reconstruction.
pub const SNR_CAP_DB: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_position: f64,
    /// Position learning rate at the cutoff, as a fraction of `lr_position`.
    pub lr_position_final_factor: f64,
    pub lr_other: f64,
    pub lambda_act: f64,
    pub lambda_reg: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Fraction of `iterations` after which Gaussian centers are frozen.
    pub position_cutoff: f64,
    pub train_positions: bool,
    /// Std-dev (meters) of the Gaussian noise added to training receiver positions.
    pub noise_sigma: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_every: usize,
    /// Stop once the best validation SNR is this many iterations old.
    pub patience: Option<usize>,
    /// Divide channels by their training-set RMS before the loss.
    pub normalize_channels: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 32,
            lr_position: 0.005,
            lr_position_final_factor: 0.01,
            lr_other: 1e-3,
            lambda_act: 0.1,
            lambda_reg: 1.0,
            s_min: 0.05,
            s_max: 0.2,
            position_cutoff: 0.625,
            train_positions: true,
            noise_sigma: 0.00387,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 50,
            patience: Some(500),
            normalize_channels: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.position_cutoff > 0.0 && self.position_cutoff <= 1.0) {
            return bad("position_cutoff must be in (0, 1]");
        }
        if !(self.s_min <= self.s_max) {
            return bad("s_min must not exceed s_max");
        }
        if !(self.lr_other > 0.0) || !(self.lr_position > 0.0) || !(self.lr_position_final_factor > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_act: self.lambda_act, lambda_reg: self.lambda_reg, s_min: self.s_min, s_max: self.s_max }
    }

    pub fn cutoff_iteration(&self) -> usize {
        (self.position_cutoff * self.iterations as f64).round() as usize
    }

    /// Position learning rate at iteration `it`, or `None` once frozen.
    pub fn position_lr(&self, it: usize) -> Option<f64> {
        let cut = self.cutoff_iteration();
        if !self.train_positions || it >= cut {
            return None;
        }
        Some(self.lr_position * self.lr_position_final_factor.powf(it as f64 / cut as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_act: f64,
    pub lambda_reg: f64,
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        TrainConfig::default().loss_weights()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub est: f64,
    pub act: f64,
    pub reg: f64,
}

#[derive(Clone, Debug)]
pub struct LossGrads {
    pub h: Vec<ChannelMatrix>,
    pub activations: Vec<f64>,
    pub scales: Vec<f64>,
}

pub fn loss(
    pred: &[ChannelMatrix],
    gt: &[ChannelMatrix],
    activations: &[f64],
    scales: &[f64],
    w: &LossWeights,
) -> Result<LossParts> {
    Ok(loss_with_grad(pred, gt, activations, scales, w)?.0)
}

/// `L_est + λ_act L_act + λ_reg L_reg` and its gradient with respect to every input.
pub fn loss_with_grad(
    pred: &[ChannelMatrix],
    gt: &[ChannelMatrix],
    activations: &[f64],
    scales: &[f64],
    w: &LossWeights,
) -> Result<(LossParts, LossGrads)> {
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    let b = pred.len() as f64;
    let mut est = 0.0;
    let mut gh = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        if p.dims() != g.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", p.dims(), g.dims())));
        }
        let data: Vec<_> = p.data.iter().zip(&g.data).map(|(a, c)| a - c).collect();
        est += data.iter().map(|d| d.norm_sqr()).sum::<f64>();
        gh.push(ChannelMatrix { nt: p.nt, nr: p.nr, data: data.into_iter().map(|d| d * (2.0 / b)).collect() });
    }
    est /= b;

    let n = activations.len().max(scales.len() / 3);
    let (mut act, mut ga) = (0.0, vec![0.0; activations.len()]);
    if !activations.is_empty() {
        let inv = 1.0 / activations.len() as f64;
        act = activations.iter().map(|a| a.abs()).sum::<f64>() * inv;
        for (g, a) in ga.iter_mut().zip(activations) {
            *g = w.lambda_act * inv * a.signum();
        }
    }
    let (mut reg, mut gs) = (0.0, vec![0.0; scales.len()]);
    if !scales.is_empty() {
        let inv = 1.0 / n as f64;
        for (g, &s) in gs.iter_mut().zip(scales) {
            if s < w.s_min {
                reg += w.s_min - s;
                *g = -w.lambda_reg * inv;
            } else if s > w.s_max {
                reg += s - w.s_max;
                *g = w.lambda_reg * inv;
            }
        }
        reg *= inv;
    }
    let total = est + w.lambda_act * act + w.lambda_reg * reg;
    Ok((LossParts { total, est, act, reg }, LossGrads { h: gh, activations: ga, scales: gs }))
}

/// `10 log10(Σ‖H_gt‖² / Σ‖H_pred − H_gt‖²)`, capped at [`SNR_CAP_DB`].
pub fn snr(pred: &[ChannelMatrix], gt: &[ChannelMatrix]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    let mut sig = 0.0;
    let mut err = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        err += p.error_energy(g)?;
        sig += g.energy();
    }
    if !(sig > 0.0) {
        return Err(Error::ZeroSignal);
    }
    if err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (sig / err).log10()).min(SNR_CAP_DB))
}

/// Root-mean-square channel entry magnitude.
pub fn channel_rms(data: &[Measurement]) -> f64 {
    let (mut e, mut k) = (0.0, 0usize);
    for m in data {
        e += m.h.energy();
        k += m.h.data.len();
    }
    if k == 0 {
        0.0
    } else {
        (e / k as f64).sqrt()
    }
}

pub fn evaluate_snr<M: FieldModel>(model: &M, data: &[Measurement]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let queries: Vec<Query> = data.iter().map(Measurement::query).collect();
    let pred = model.predict(&queries)?;
    let gt: Vec<ChannelMatrix> = data.iter().map(|m| m.h.clone()).collect();
    snr(&pred, &gt)
}

/// Per-group Adam (or plain SGD) state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// Updates every group whose learning rate is `Some`; `None` groups stay bitwise unchanged.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], lrs: &[Option<f64>]) {
        for (g, p) in params.into_iter().enumerate() {
            let Some(lr) = lrs[g] else { continue };
            let grad = &grads[g];
            match self.kind {
                OptimizerKind::Sgd => p.iter_mut().zip(grad).for_each(|(x, d)| *x -= lr * d),
                OptimizerKind::Adam => {
                    self.t[g] += 1;
                    let t = self.t[g] as i32;
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    let (m, v) = (&mut self.m[g], &mut self.v[g]);
                    for k in 0..p.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * grad[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub loss: f64,
    pub est: f64,
    pub act: f64,
    pub reg: f64,
    pub train_snr: f64,
    pub test_snr: Option<f64>,
}

pub fn write_metrics_csv(rows: &[MetricRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "iter,loss,est,act,reg,train_snr,test_snr")?;
    for r in rows {
        let test = r.test_snr.map(|v| format!("{v:.17e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            r.iter, r.loss, r.est, r.act, r.reg, r.train_snr, test
        )?;
    }
    Ok(())
}

pub fn save_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_metrics_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Parameters at the best validation SNR.
    pub best: M,
    pub best_iteration: usize,
    pub best_snr_db: f64,
    pub last: M,
    pub iterations_run: usize,
    pub history: Vec<MetricRow>,
    /// First evaluation whose SNR stayed within 1 dB of it for the following 500 iterations.
    pub converged_at: Option<usize>,
    pub seconds: f64,
}

/// Tolerance and window for the convergence criterion.
pub const CONVERGENCE_DB: f64 = 1.0;
pub const CONVERGENCE_WINDOW: usize = 500;

/// Trains `model` on `train`, selecting the checkpoint by SNR on `test`
/// (or on `train` when `test` is empty).
pub fn train<M: FieldModel>(mut model: M, train: &[Measurement], test: &[Measurement], cfg: &TrainConfig) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let started = Instant::now();
    let dims = model.dims();
    if train.iter().chain(test).any(|m| m.h.dims() != dims) {
        return Err(Error::shape(format!("dataset antenna counts do not match the model {dims:?}")));
    }

    let scale = if cfg.normalize_channels { channel_rms(train) } else { 1.0 };
    if !(scale > 0.0) {
        return Err(Error::ZeroSignal);
    }
    model.set_output_scale(scale);
    let inv_scale = 1.0 / scale;

    let groups = model.groups();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = Optimizer::new(cfg, &sizes);
    let weights = cfg.loss_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6469_6f66_6965);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let batch = cfg.batch_size.min(train.len());

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let eval = |m: &M| -> Result<(f64, Option<f64>)> {
        let tr = evaluate_snr(m, train)?;
        let te = if test.is_empty() { None } else { Some(evaluate_snr(m, test)?) };
        Ok((tr, te))
    };

    let mut history = Vec::new();
    let (tr0, te0) = eval(&model)?;
    let init_parts = {
        let q: Vec<Query> = train.iter().map(Measurement::query).collect();
        let f = model.forward(&q)?;
        let pred: Vec<_> = f.channels.iter().map(|h| h.scaled(inv_scale)).collect();
        let gt: Vec<_> = train.iter().map(|m| m.h.scaled(inv_scale)).collect();
        loss(&pred, &gt, &f.activations, &f.scales, &weights)?
    };
    history.push(row(0, &init_parts, tr0, te0));
    let mut best = model.clone();
    let mut best_snr = te0.unwrap_or(tr0);
    let mut best_iteration = 0;

    let mut acc = LossParts::default();
    let mut acc_n = 0usize;
    let mut iterations_run = 0;

    for it in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let queries: Vec<Query> = idx
            .iter()
            .map(|&k| {
                let m = &train[k];
                let rx = if cfg.noise_sigma > 0.0 {
                    m.rx + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    m.rx
                };
                Query { tx: m.tx, rx }
            })
            .collect();

        let fwd = model.forward(&queries)?;
        let pred: Vec<_> = fwd.channels.iter().map(|h| h.scaled(inv_scale)).collect();
        let gt: Vec<_> = idx.iter().map(|&k| train[k].h.scaled(inv_scale)).collect();
        let (parts, lg) = loss_with_grad(&pred, &gt, &fwd.activations, &fwd.scales, &weights)?;
        let grad_h: Vec<_> = lg.h.iter().map(|g| g.scaled(inv_scale)).collect();
        let grads = model.backward(&fwd.cache, &grad_h, &lg.activations, &lg.scales)?;

        if !parts.total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            let group = grads
                .iter()
                .position(|g| g.iter().any(|v| !v.is_finite()))
                .or_else(|| model.params().iter().position(|p| p.iter().any(|v| !v.is_finite())))
                .map(|k| groups[k].name.clone())
                .unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite { group, iteration: it });
        }

        let lrs: Vec<Option<f64>> = groups
            .iter()
            .map(|g| match g.kind {
                GroupKind::Position => cfg.position_lr(it),
                GroupKind::Standard => Some(cfg.lr_other),
            })
            .collect();
        opt.step(model.params_mut(), &grads, &lrs);
        model.after_step();
        iterations_run = it + 1;

        acc.total += parts.total;
        acc.est += parts.est;
        acc.act += parts.act;
        acc.reg += parts.reg;
        acc_n += 1;

        if iterations_run % cfg.eval_every == 0 || iterations_run == cfg.iterations {
            let k = acc_n as f64;
            let mean = LossParts { total: acc.total / k, est: acc.est / k, act: acc.act / k, reg: acc.reg / k };
            acc = LossParts::default();
            acc_n = 0;
            let (tr, te) = eval(&model)?;
            history.push(row(iterations_run, &mean, tr, te));
            let sel = te.unwrap_or(tr);
            if sel > best_snr {
                best_snr = sel;
                best_iteration = iterations_run;
                best = model.clone();
            }
            if let Some(p) = cfg.patience {
                if iterations_run - best_iteration >= p {
                    break;
                }
            }
        }
    }

    let converged_at = convergence_iteration(&history);
    Ok(TrainOutcome {
        best,
        best_iteration,
        best_snr_db: best_snr,
        last: model,
        iterations_run,
        history,
        converged_at,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn row(iter: usize, p: &LossParts, train_snr: f64, test_snr: Option<f64>) -> MetricRow {
    MetricRow { iter, loss: p.total, est: p.est, act: p.act, reg: p.reg, train_snr, test_snr }
}

/// First row whose validation SNR is the running best and does not drop by more than
/// [`CONVERGENCE_DB`] over the next [`CONVERGENCE_WINDOW`] iterations.
pub fn convergence_iteration(history: &[MetricRow]) -> Option<usize> {
    let snr = |r: &MetricRow| r.test_snr.unwrap_or(r.train_snr);
    let last = history.last()?.iter;
    let mut best = f64::NEG_INFINITY;
    for (k, r) in history.iter().enumerate() {
        best = best.max(snr(r));
        if r.iter + CONVERGENCE_WINDOW > last {
            break;
        }
        let window = history[k..].iter().take_while(|x| x.iter <= r.iter + CONVERGENCE_WINDOW);
        if snr(r) >= best
            && window.clone().all(|x| snr(x) >= best - CONVERGENCE_DB) && window.clone().all(|x| snr(x) <= best + CONVERGENCE_DB) {
            return Some(r.iter);
        }
    }
    None
}
