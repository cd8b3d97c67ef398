//! Toy quantization-aware training on Gaussian-cluster data.
//!
//! Model: `x -> Dense(W1) -> BatchNorm -> ReLU -> Q_act -> Dense(W2, b2)`
//! with softmax cross-entropy. During training the batch norm is folded into
//! `W1` every step using the batch statistics and the folded weights are
//! quantized; evaluation folds with the moving statistics instead.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::grad::{
    backward_with_scale, effective_scale, freeze_step, GradScaleState, RoundingMode,
};
use crate::harness::metrics::{
    layer_mean, metric_dynamic_range_ratio, metric_fluctuation_variance,
    metric_quant_error_variance, metric_scale_transitions, metric_mean_exponent_change,
    metric_second_moment_ratio,
};
use crate::harness::series::MetricSeries;
use crate::msqe::{outlier_mask, GvaState, MsqeFitConfig, MsqeQuantizer, DEFAULT_GVA_DECAY};
use crate::optim::{AdamState, CosineDecay};
use crate::quant::{
    fold_batchnorm, po2_project, quantize, round_half_away, BnParams, Po2Scale, QuantConfig,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QatModelConfig {
    pub hidden: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validation accuracy is recorded every this many steps.
    pub eval_every: usize,
}

impl Default for QatModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            bn_epsilon: 1e-3,
            bn_momentum: 0.9,
            steps: 1500,
            batch_size: 128,
            lr: 0.01,
            seed: 0,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightQuantizerConfig {
    Float,
    Msqe { fit: MsqeFitConfig },
    Grad { mode: RoundingMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QatQuantizerConfig {
    pub weights: WeightQuantizerConfig,
    pub weight_bits: u32,
    /// Rounding mode of the learned activation quantizer; `None` keeps
    /// activations in floating point.
    pub activation_mode: Option<RoundingMode>,
    pub activation_bits: u32,
    pub quantize_bias: bool,
    pub bias_bits: u32,
    /// Adam learning rate of the learned log2 scales.
    pub scale_lr: f64,
    /// Fraction of training after which scales stop moving.
    pub freeze_fraction: Option<f64>,
}

impl Default for QatQuantizerConfig {
    fn default() -> Self {
        Self {
            weights: WeightQuantizerConfig::Msqe {
                fit: MsqeFitConfig {
                    sigma_outlier: Some(crate::msqe::DEFAULT_SIGMA_OUTLIER),
                    use_gva: true,
                    ..MsqeFitConfig::default()
                },
            },
            weight_bits: 4,
            activation_mode: Some(RoundingMode::Rtlm),
            activation_bits: 4,
            quantize_bias: true,
            bias_bits: 8,
            scale_lr: 0.01,
            freeze_fraction: Some(0.94),
        }
    }
}

impl QatQuantizerConfig {
    /// Everything in floating point.
    pub fn float() -> Self {
        Self {
            weights: WeightQuantizerConfig::Float,
            activation_mode: None,
            quantize_bias: false,
            freeze_fraction: None,
            ..Self::default()
        }
    }

    pub fn with_weights(weights: WeightQuantizerConfig) -> Self {
        Self {
            weights,
            ..Self::default()
        }
    }
}

/// Multiplies the largest-magnitude output-layer weights by a factor
/// ramping linearly from 1 to `max_factor` over `ramp_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierInjection {
    pub start_step: usize,
    pub ramp_steps: usize,
    pub max_factor: f64,
    pub fraction: f64,
}

impl Default for OutlierInjection {
    fn default() -> Self {
        Self {
            start_step: 500,
            ramp_steps: 100,
            max_factor: 50.0,
            fraction: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QatDataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of the cluster centres.
    pub center_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub outliers: Option<OutlierInjection>,
}

impl Default for QatDataConfig {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_val: 2000,
            dim: 16,
            classes: 4,
            center_scale: 1.0,
            noise_std: 1.0,
            seed: 0,
            outliers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
            y.push(self.y[i]);
        }
        (x, y)
    }
}

/// Balanced Gaussian clusters, shuffled, split into (train, validation).
pub fn gaussian_clusters(cfg: &QatDataConfig) -> Result<(Dataset, Dataset)> {
    if cfg.dim == 0 || cfg.classes < 2 || cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(QuantError::InvalidConfig(
            "dataset needs dim >= 1, classes >= 2 and nonempty splits".into(),
        ));
    }
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| QuantError::InvalidConfig(format!("noise_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<f64> = (0..cfg.classes * cfg.dim)
        .map(|_| cfg.center_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let n = cfg.n_train + cfg.n_val;
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let mut x = Vec::with_capacity(n * cfg.dim);
    for &c in &labels {
        for d in 0..cfg.dim {
            x.push(centers[c * cfg.dim + d] + noise.sample(&mut rng));
        }
    }
    let split = cfg.n_train * cfg.dim;
    Ok((
        Dataset {
            dim: cfg.dim,
            classes: cfg.classes,
            x: x[..split].to_vec(),
            y: labels[..cfg.n_train].to_vec(),
        },
        Dataset {
            dim: cfg.dim,
            classes: cfg.classes,
            x: x[split..].to_vec(),
            y: labels[cfg.n_train..].to_vec(),
        },
    ))
}

/// Trainable parameters and batch-norm moving statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct QatParams {
    /// `[hidden, dim]`
    pub w1: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// `[classes, hidden]`
    pub w2: Tensor,
    pub b2: Vec<f64>,
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
}

impl QatParams {
    pub fn init(dim: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
                .collect()
        };
        let w1 = Tensor::new(normal(hidden * dim, (2.0 / dim as f64).sqrt()), vec![hidden, dim])?;
        let w2 = Tensor::new(normal(classes * hidden, (1.0 / hidden as f64).sqrt()), vec![classes, hidden])?;
        Ok(Self {
            w1,
            gamma: vec![1.0; hidden],
            beta: vec![0.0; hidden],
            w2,
            b2: vec![0.0; classes],
            moving_mean: vec![0.0; hidden],
            moving_var: vec![1.0; hidden],
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.w2.shape()[0]
    }
}

/// Gradients matching the fields of [`QatParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct QatGrads {
    pub w1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Folds the batch norm into `W1` with per-channel statistics of `x W1^T`:
/// returns `(W_f, b_f, s)` with `s = gamma / sqrt(var + eps)`,
/// `W_f = s * W1` and `b_f = beta - s * mean`.
pub fn fold_with_stats(
    p: &QatParams,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (h, d) = (p.hidden(), p.dim());
    let s: Vec<f64> = (0..h).map(|c| p.gamma[c] / (var[c] + eps).sqrt()).collect();
    let mut wf = p.w1.clone();
    for c in 0..h {
        for v in &mut wf.data_mut()[c * d..(c + 1) * d] {
            *v *= s[c];
        }
    }
    let bf = (0..h).map(|c| p.beta[c] - s[c] * mean[c]).collect();
    Ok((wf, bf, s))
}

fn dense(x: &[f64], n: usize, w: &Tensor, bias: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut y = vec![0.0; n * out];
    for b in 0..n {
        let xr = &x[b * inp..(b + 1) * inp];
        for o in 0..out {
            let wr = &wd[o * inp..(o + 1) * inp];
            y[b * out + o] = xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>() + bias[o];
        }
    }
    y
}

/// Mean cross-entropy, its gradient with respect to the logits, and the
/// number of correct argmax predictions.
fn softmax_xent(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>, usize) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let (mut loss, mut correct) = (0.0, 0);
    for b in 0..n {
        let row = &logits[b * classes..(b + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[labels[b]];
        let arg = argmax(row);
        if arg == labels[b] {
            correct += 1;
        }
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            grad[b * classes + c] = (p - if c == labels[b] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad, correct)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Batch mean of the inputs, the per-channel mean and population variance of
/// `x W1^T`, and the centred inputs.
fn batch_stats(p: &QatParams, x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, d) = (p.hidden(), p.dim());
    let mut xbar = vec![0.0; d];
    for b in 0..n {
        for j in 0..d {
            xbar[j] += x[b * d + j];
        }
    }
    xbar.iter_mut().for_each(|v| *v /= n as f64);
    let xt: Vec<f64> = x.iter().enumerate().map(|(i, v)| v - xbar[i % d]).collect();
    let w = p.w1.data();
    let mut mean = vec![0.0; h];
    let mut var = vec![0.0; h];
    for c in 0..h {
        let wr = &w[c * d..(c + 1) * d];
        mean[c] = wr.iter().zip(&xbar).map(|(a, b)| a * b).sum();
        var[c] = (0..n)
            .map(|b| {
                let zc: f64 = xt[b * d..(b + 1) * d].iter().zip(wr).map(|(a, b)| a * b).sum();
                zc * zc
            })
            .sum::<f64>()
            / n as f64;
    }
    (xbar, xt, mean, var)
}

/// Backpropagates gradients of the folded weights and bias through the
/// batch-statistics fold to `W1`, `gamma` and `beta`.
#[allow(clippy::too_many_arguments)]
fn fold_backward(
    p: &QatParams,
    g_wf: &[f64],
    g_bf: &[f64],
    xbar: &[f64],
    xt: &[f64],
    n: usize,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, d) = (p.hidden(), p.dim());
    let w = p.w1.data();
    let mut sigma = vec![0.0; d * d];
    for b in 0..n {
        let r = &xt[b * d..(b + 1) * d];
        for i in 0..d {
            for j in 0..d {
                sigma[i * d + j] += r[i] * r[j];
            }
        }
    }
    sigma.iter_mut().for_each(|v| *v /= n as f64);
    let mut dw = vec![0.0; h * d];
    let mut dgamma = vec![0.0; h];
    for c in 0..h {
        let wr = &w[c * d..(c + 1) * d];
        let inv = 1.0 / (var[c] + eps).sqrt();
        let s = p.gamma[c] * inv;
        let gw = &g_wf[c * d..(c + 1) * d];
        // dL/ds through both W_f = s W and b_f = beta - s mean.
        let ds = gw.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() - g_bf[c] * mean[c];
        let coef = -p.gamma[c] * inv * inv * inv;
        for i in 0..d {
            let sw: f64 = (0..d).map(|j| sigma[i * d + j] * wr[j]).sum();
            dw[c * d + i] = s * gw[i] - s * g_bf[c] * xbar[i] + ds * coef * sw;
        }
        dgamma[c] = ds * inv;
    }
    (dw, dgamma, g_bf.to_vec())
}

/// Loss and exact gradients of the unquantized training-path forward (batch
/// statistics folded into `W1`).
pub fn float_loss_and_grads(
    p: &QatParams,
    x: &[f64],
    labels: &[usize],
    eps: f64,
) -> Result<(f64, QatGrads)> {
    let n = labels.len();
    let (h, d, classes) = (p.hidden(), p.dim(), p.classes());
    let (xbar, xt, mean, var) = batch_stats(p, x, n);
    let (wf, bf, _) = fold_with_stats(p, &mean, &var, eps)?;
    let y = dense(x, n, &wf, &bf);
    let a: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    let logits = dense(&a, n, &p.w2, &p.b2);
    let (loss, dl, _) = softmax_xent(&logits, labels, classes);
    let (gw2, gb2, da) = dense_backward(&a, n, &p.w2, &dl);
    let dy: Vec<f64> = da.iter().zip(&y).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
    let (gwf, gbf, _) = dense_backward(x, n, &wf, &dy);
    let _ = (h, d);
    let (dw1, dgamma, dbeta) = fold_backward(p, &gwf, &gbf, &xbar, &xt, n, &mean, &var, eps);
    Ok((
        loss,
        QatGrads {
            w1: dw1,
            gamma: dgamma,
            beta: dbeta,
            w2: gw2,
            b2: gb2,
        },
    ))
}

/// Gradients of `y = x W^T + b` given `dy`: `(dW, db, dx)`.
fn dense_backward(x: &[f64], n: usize, w: &Tensor, dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut dw = vec![0.0; out * inp];
    let mut db = vec![0.0; out];
    let mut dx = vec![0.0; n * inp];
    for b in 0..n {
        for o in 0..out {
            let g = dy[b * out + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            for i in 0..inp {
                dw[o * inp + i] += g * x[b * inp + i];
                dx[b * inp + i] += g * wd[o * inp + i];
            }
        }
    }
    (dw, db, dx)
}

/// A learned log2 scale with its optimizer state.
#[derive(Debug, Clone)]
struct LearnedScale {
    mode: RoundingMode,
    cfg: QuantConfig,
    state: Option<GradScaleState>,
    adam: AdamState,
    gva: Option<GvaState>,
}

impl LearnedScale {
    fn new(mode: RoundingMode, cfg: QuantConfig, track_gva: bool, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            mode,
            cfg,
            state: None,
            adam: AdamState::scalar(),
            gva: if track_gva {
                Some(GvaState::new(shape, DEFAULT_GVA_DECAY)?)
            } else {
                None
            },
        })
    }

    fn forward(&mut self, w: &Tensor, freeze: bool) -> Result<(Tensor, Po2Scale)> {
        let mut state = match self.state {
            Some(s) => s,
            None => match GradScaleState::from_range(w, &self.cfg, self.mode) {
                Ok(s) => s,
                Err(QuantError::Domain(_)) => GradScaleState::new(0.0, self.mode)?,
                Err(e) => return Err(e),
            },
        };
        if freeze {
            state.freeze()?;
        }
        let gva = self.gva.as_ref().filter(|g| g.step_count() > 0);
        let observed = effective_scale(&state, w, gva, &self.cfg)?;
        let (next, scale) = freeze_step(&state, observed)?;
        self.state = Some(next);
        Ok((quantize(w, scale, &self.cfg)?, scale))
    }

    fn backward(&mut self, w: &Tensor, scale: Po2Scale, upstream: &Tensor, lr: f64) -> Result<Tensor> {
        let mut state = self.state.expect("forward precedes backward");
        let (gw, gd) = backward_with_scale(w, scale, &state, upstream, &self.cfg)?;
        if let Some(g) = self.gva.as_mut() {
            g.update_in_place(&gw)?;
        }
        if !state.frozen {
            self.adam.update_scalar(&mut state.delta_log2, gd, lr)?;
        }
        self.state = Some(state);
        Ok(gw)
    }

    fn eval_scale(&self) -> Option<Po2Scale> {
        self.state.map(|s| s.last_po2)
    }
}

#[derive(Debug, Clone)]
enum WeightQuant {
    Float,
    Msqe(MsqeQuantizer),
    Grad(LearnedScale),
}

impl WeightQuant {
    fn new(cfg: &WeightQuantizerConfig, qc: QuantConfig, shape: &[usize]) -> Result<Self> {
        Ok(match cfg {
            WeightQuantizerConfig::Float => Self::Float,
            WeightQuantizerConfig::Msqe { fit } => Self::Msqe(MsqeQuantizer::new(*fit, qc)?),
            WeightQuantizerConfig::Grad { mode } => Self::Grad(LearnedScale::new(*mode, qc, true, shape)?),
        })
    }

    fn forward(&mut self, w: &Tensor, freeze: bool) -> Result<(Tensor, Option<Po2Scale>)> {
        match self {
            Self::Float => Ok((w.clone(), None)),
            Self::Msqe(q) => {
                let scale = match (freeze, q.scale()) {
                    (true, Some(s)) => s,
                    _ => q.update(w)?.scale,
                };
                Ok((quantize(w, scale, &q.cfg)?, Some(scale)))
            }
            Self::Grad(l) => {
                let (wq, s) = l.forward(w, freeze)?;
                Ok((wq, Some(s)))
            }
        }
    }

    /// Straight-through gradient at the quantizer input; also feeds the
    /// second-moment trackers and steps learned scales.
    fn backward(&mut self, w: &Tensor, scale: Option<Po2Scale>, upstream: Tensor, lr: f64) -> Result<Tensor> {
        match (self, scale) {
            (Self::Msqe(q), Some(s)) => {
                let step = s.value();
                let cfg = q.cfg;
                let g = upstream.zip_map(w, |g, x| {
                    if cfg.contains(round_half_away(x / step)) {
                        g
                    } else {
                        0.0
                    }
                })?;
                q.observe_gradient(&g)?;
                Ok(g)
            }
            (Self::Grad(l), Some(s)) => l.backward(w, s, &upstream, lr),
            _ => Ok(upstream),
        }
    }

    fn eval_scale(&self) -> Option<Po2Scale> {
        match self {
            Self::Float => None,
            Self::Msqe(q) => q.scale(),
            Self::Grad(l) => l.eval_scale(),
        }
    }

    fn cfg(&self) -> Option<QuantConfig> {
        match self {
            Self::Float => None,
            Self::Msqe(q) => Some(q.cfg),
            Self::Grad(l) => Some(l.cfg),
        }
    }

    fn gva(&self) -> Option<&GvaState> {
        match self {
            Self::Float => None,
            Self::Msqe(q) => q.gva(),
            Self::Grad(l) => l.gva.as_ref(),
        }
    }
}

/// Power-of-two bias quantization at `cfg`'s range, scale projected from
/// `max|b| / q_max`.
pub fn quantize_bias(b: &[f64], cfg: &QuantConfig) -> Result<Vec<f64>> {
    let m = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return Ok(b.to_vec());
    }
    let scale = po2_project(m / cfg.q_max() as f64)?;
    Ok(quantize(&Tensor::from_vec(b.to_vec()), scale, cfg)?.into_data())
}

/// Trained model with the scales its quantizers settled on.
#[derive(Debug, Clone)]
pub struct QatModel {
    pub params: QatParams,
    pub bn_epsilon: f64,
    pub weight_cfg: Option<QuantConfig>,
    pub w1_scale: Option<Po2Scale>,
    pub w2_scale: Option<Po2Scale>,
    pub act_cfg: Option<QuantConfig>,
    pub act_scale: Option<Po2Scale>,
    pub bias_cfg: Option<QuantConfig>,
}

impl QatModel {
    fn tail(&self, x: &[f64], n: usize, wf: &Tensor, bf: &[f64]) -> Result<Vec<f64>> {
        let wfq = match (self.weight_cfg, self.w1_scale) {
            (Some(c), Some(s)) => quantize(wf, s, &c)?,
            _ => wf.clone(),
        };
        let mut a: Vec<f64> = dense(x, n, &wfq, bf).into_iter().map(|v| v.max(0.0)).collect();
        if let (Some(c), Some(s)) = (self.act_cfg, self.act_scale) {
            a = quantize(&Tensor::from_vec(a), s, &c)?.into_data();
        }
        let w2q = match (self.weight_cfg, self.w2_scale) {
            (Some(c), Some(s)) => quantize(&self.params.w2, s, &c)?,
            _ => self.params.w2.clone(),
        };
        let b2q = match self.bias_cfg {
            Some(c) => quantize_bias(&self.params.b2, &c)?,
            None => self.params.b2.clone(),
        };
        Ok(dense(&a, n, &w2q, &b2q))
    }

    /// Inference logits: batch norm folded with the moving statistics via
    /// [`fold_batchnorm`], then quantized.
    pub fn eval_logits(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let p = &self.params;
        let bn = BnParams::new(
            p.gamma.clone(),
            p.beta.clone(),
            p.moving_mean.clone(),
            p.moving_var.clone(),
            self.bn_epsilon,
        )?;
        let (wf, bf) = fold_batchnorm(&p.w1, &Tensor::zeros(&[p.hidden()])?, &bn)?;
        self.tail(x, n, &wf, bf.data())
    }

    /// The training-path computation run with the moving statistics in place
    /// of batch statistics.
    pub fn training_path_logits(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let p = &self.params;
        let (wf, bf, _) = fold_with_stats(p, &p.moving_mean, &p.moving_var, self.bn_epsilon)?;
        self.tail(x, n, &wf, &bf)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let logits = self.eval_logits(&data.x, data.len())?;
        let c = data.classes;
        let correct = (0..data.len())
            .filter(|&b| argmax(&logits[b * c..(b + 1) * c]) == data.y[b])
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QatSummary {
    pub final_train_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    /// Step at which the loss (or a quantizer input) became non-finite.
    pub diverged_at: Option<u64>,
    pub steps_completed: u64,
    pub transitions: BTreeMap<String, usize>,
    pub mean_exponent_change: BTreeMap<String, f64>,
    pub final_second_moment_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct QatRun {
    pub summary: QatSummary,
    pub series: Vec<MetricSeries>,
    pub model: QatModel,
}

impl QatRun {
    pub fn series(&self, name: &str) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.name == name)
    }
}

struct Recorder(BTreeMap<&'static str, MetricSeries>);

impl Recorder {
    fn push(&mut self, name: &'static str, step: u64, value: f64) -> Result<()> {
        self.0
            .entry(name)
            .or_insert_with(|| MetricSeries::new(name))
            .push(step, value)
    }
}

/// Errors that mean training blew up. All-zero codes count once parameters
/// have moved away from their initial values.
fn is_divergence(e: &QuantError, step: u64) -> bool {
    match e {
        QuantError::NonFinite { .. } | QuantError::ExponentOutOfRange(_) | QuantError::Domain(_) => true,
        QuantError::DegenerateCodes { .. } => step > 0,
        _ => false,
    }
}

fn top_k_indices(w: &Tensor, fraction: f64) -> Vec<usize> {
    let k = ((w.len() as f64 * fraction).ceil() as usize).clamp(1, w.len());
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w.data()[b].abs().total_cmp(&w.data()[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

struct Trainer {
    params: QatParams,
    eps: f64,
    momentum: f64,
    q1: WeightQuant,
    q2: WeightQuant,
    qa: Option<LearnedScale>,
    bias_cfg: Option<QuantConfig>,
    adam: [AdamState; 5],
    prev_wq: Option<(Tensor, Tensor)>,
}

struct StepOutput {
    loss: f64,
    correct: usize,
    w1_scale: Option<Po2Scale>,
    w2_scale: Option<Po2Scale>,
    act_scale: Option<Po2Scale>,
    wf: Tensor,
    wfq: Tensor,
    w2q: Tensor,
}

impl Trainer {
    fn step(&mut self, x: &[f64], labels: &[usize], freeze: bool, lr: f64, scale_lr: f64) -> Result<StepOutput> {
        let n = labels.len();
        let classes = self.params.classes();
        let (xbar, xt, mean, var) = batch_stats(&self.params, x, n);
        let (wf, bf, _) = fold_with_stats(&self.params, &mean, &var, self.eps)?;
        let (wfq, s1) = self.q1.forward(&wf, freeze)?;
        let y = dense(x, n, &wfq, &bf);
        let a = Tensor::from_vec(y.iter().map(|v| v.max(0.0)).collect());
        let (aq, sa) = match self.qa.as_mut() {
            Some(q) => {
                let (t, s) = q.forward(&a, freeze)?;
                (t, Some(s))
            }
            None => (a.clone(), None),
        };
        let (w2q, s2) = self.q2.forward(&self.params.w2, freeze)?;
        let b2q = match &self.bias_cfg {
            Some(c) => quantize_bias(&self.params.b2, c)?,
            None => self.params.b2.clone(),
        };
        let logits = dense(aq.data(), n, &w2q, &b2q);
        let (loss, dl, correct) = softmax_xent(&logits, labels, classes);
        if !loss.is_finite() {
            return Err(QuantError::NonFinite { index: 0, value: loss });
        }

        let (gw2q, gb2, daq) = dense_backward(aq.data(), n, &w2q, &dl);
        let gw2 = self.q2.backward(
            &self.params.w2,
            s2,
            Tensor::new(gw2q, self.params.w2.shape().to_vec())?,
            scale_lr,
        )?;
        let da = match (self.qa.as_mut(), sa) {
            (Some(q), Some(s)) => q.backward(&a, s, &Tensor::from_vec(daq), scale_lr)?.into_data(),
            _ => daq,
        };
        let dy: Vec<f64> = da.iter().zip(&y).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
        let (gwfq, gbf, _) = dense_backward(x, n, &wfq, &dy);
        let gwf = self.q1.backward(&wf, s1, Tensor::new(gwfq, wf.shape().to_vec())?, scale_lr)?;
        let (dw1, dgamma, dbeta) =
            fold_backward(&self.params, gwf.data(), &gbf, &xbar, &xt, n, &mean, &var, self.eps);

        let p = &mut self.params;
        self.adam[0].update(p.w1.data_mut(), &dw1, lr)?;
        self.adam[1].update(&mut p.gamma, &dgamma, lr)?;
        self.adam[2].update(&mut p.beta, &dbeta, lr)?;
        self.adam[3].update(p.w2.data_mut(), gw2.data(), lr)?;
        self.adam[4].update(&mut p.b2, &gb2, lr)?;
        let m = self.momentum;
        for c in 0..p.hidden() {
            p.moving_mean[c] = m * p.moving_mean[c] + (1.0 - m) * mean[c];
            p.moving_var[c] = m * p.moving_var[c] + (1.0 - m) * var[c];
        }
        Ok(StepOutput {
            loss,
            correct,
            w1_scale: s1,
            w2_scale: s2,
            act_scale: sa,
            wf,
            wfq,
            w2q,
        })
    }

    fn model(&self) -> QatModel {
        QatModel {
            params: self.params.clone(),
            bn_epsilon: self.eps,
            weight_cfg: self.q1.cfg(),
            w1_scale: self.q1.eval_scale(),
            w2_scale: self.q2.eval_scale(),
            act_cfg: self.qa.as_ref().map(|q| q.cfg),
            act_scale: self.qa.as_ref().and_then(|q| q.eval_scale()),
            bias_cfg: self.bias_cfg,
        }
    }
}

/// Trains the toy model and records per-step metrics.
///
/// Recorded series: `loss`, `batch_accuracy`, `val_accuracy`,
/// `exponent_w1`, `exponent_w2`, `exponent_act`, `quant_error_variance`,
/// `fluctuation_variance`, `dynamic_range_ratio` and, when the output layer
/// tracks second moments, `second_moment_ratio`. A non-finite loss stops
/// training and is reported in the summary rather than as an error.
pub fn toy_qat_train(
    model_cfg: &QatModelConfig,
    quantizer_cfg: &QatQuantizerConfig,
    data_cfg: &QatDataConfig,
) -> Result<QatRun> {
    if model_cfg.steps == 0 || model_cfg.batch_size == 0 || model_cfg.hidden == 0 {
        return Err(QuantError::InvalidConfig(
            "steps, batch_size and hidden must be positive".into(),
        ));
    }
    if let Some(f) = quantizer_cfg.freeze_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(QuantError::InvalidConfig(format!(
                "freeze_fraction must lie in [0, 1], got {f}"
            )));
        }
    }
    let (train, val) = gaussian_clusters(data_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model_cfg.seed);
    let params = QatParams::init(data_cfg.dim, model_cfg.hidden, data_cfg.classes, &mut rng)?;
    let wcfg = QuantConfig::signed(quantizer_cfg.weight_bits)?;
    let h = model_cfg.hidden;
    let mut trainer = Trainer {
        q1: WeightQuant::new(&quantizer_cfg.weights, wcfg, &[h, data_cfg.dim])?,
        q2: WeightQuant::new(&quantizer_cfg.weights, wcfg, &[data_cfg.classes, h])?,
        qa: match quantizer_cfg.activation_mode {
            Some(mode) => Some(LearnedScale::new(
                mode,
                QuantConfig::unsigned(quantizer_cfg.activation_bits)?,
                false,
                &[1],
            )?),
            None => None,
        },
        bias_cfg: if quantizer_cfg.quantize_bias {
            Some(QuantConfig::signed(quantizer_cfg.bias_bits)?)
        } else {
            None
        },
        adam: [
            AdamState::new(&[h * data_cfg.dim])?,
            AdamState::new(&[h])?,
            AdamState::new(&[h])?,
            AdamState::new(&[data_cfg.classes * h])?,
            AdamState::new(&[data_cfg.classes])?,
        ],
        params,
        eps: model_cfg.bn_epsilon,
        momentum: model_cfg.bn_momentum,
        prev_wq: None,
    };
    let schedule = CosineDecay::new(model_cfg.lr, model_cfg.steps as u64, 0.001);
    let freeze_at = quantizer_cfg
        .freeze_fraction
        .map(|f| (f * model_cfg.steps as f64).floor() as usize);
    let sigma = match quantizer_cfg.weights {
        WeightQuantizerConfig::Msqe { fit } => fit.sigma_outlier,
        _ => None,
    }
    .unwrap_or(crate::msqe::DEFAULT_SIGMA_OUTLIER);

    let mut rec = Recorder(BTreeMap::new());
    let mut diverged_at = None;
    let mut steps_completed = 0u64;
    let mut outlier_idx: Option<Vec<usize>> = None;
    let mut applied_factor = 1.0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    for t in 0..model_cfg.steps {
        let step = t as u64;
        if let Some(inj) = data_cfg.outliers {
            if t >= inj.start_step && inj.ramp_steps > 0 {
                let idx = outlier_idx.get_or_insert_with(|| top_k_indices(&trainer.params.w2, inj.fraction));
                let progress = ((t - inj.start_step + 1) as f64 / inj.ramp_steps as f64).min(1.0);
                let factor = 1.0 + (inj.max_factor - 1.0) * progress;
                for &i in idx.iter() {
                    trainer.params.w2.data_mut()[i] *= factor / applied_factor;
                }
                applied_factor = factor;
            }
        }
        if cursor + model_cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + model_cfg.batch_size).min(order.len())];
        cursor += model_cfg.batch_size;
        let (x, y) = train.gather(batch);
        let freeze = freeze_at.is_some_and(|f| t >= f);
        let out = match trainer.step(&x, &y, freeze, schedule.lr(step), quantizer_cfg.scale_lr) {
            Ok(o) => o,
            Err(e) if is_divergence(&e, step) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        steps_completed += 1;

        rec.push("loss", step, out.loss)?;
        rec.push("batch_accuracy", step, out.correct as f64 / y.len() as f64)?;
        for (name, s) in [
            ("exponent_w1", out.w1_scale),
            ("exponent_w2", out.w2_scale),
            ("exponent_act", out.act_scale),
        ] {
            if let Some(s) = s {
                rec.push(name, step, s.exponent() as f64)?;
            }
        }
        let w2 = &trainer.params.w2;
        rec.push(
            "quant_error_variance",
            step,
            layer_mean(&[
                metric_quant_error_variance(&out.wf, &out.wfq)?,
                metric_quant_error_variance(w2, &out.w2q)?,
            ]),
        )?;
        if let Some((p1, p2)) = &trainer.prev_wq {
            rec.push(
                "fluctuation_variance",
                step,
                layer_mean(&[
                    metric_fluctuation_variance(&out.wfq, p1)?,
                    metric_fluctuation_variance(&out.w2q, p2)?,
                ]),
            )?;
        }
        let ranges: Vec<f64> = [&out.wf, w2]
            .iter()
            .filter_map(|w| metric_dynamic_range_ratio(w, 0).ok())
            .collect();
        if !ranges.is_empty() {
            rec.push("dynamic_range_ratio", step, layer_mean(&ranges))?;
        }
        if let Some(g) = trainer.q2.gva() {
            if g.step_count() > 0 {
                if let Ok(r) = metric_second_moment_ratio(g.v(), &outlier_mask(w2, sigma)) {
                    rec.push("second_moment_ratio", step, r)?;
                }
            }
        }
        trainer.prev_wq = Some((out.wfq, out.w2q));

        if model_cfg.eval_every > 0 && (t + 1) % model_cfg.eval_every == 0 {
            match trainer.model().accuracy(&val) {
                Ok(acc) => rec.push("val_accuracy", step, acc)?,
                Err(e) if is_divergence(&e, step) => {
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let model = trainer.model();
    let (final_train_accuracy, final_val_accuracy) = if diverged_at.is_none() {
        (Some(model.accuracy(&train)?), Some(model.accuracy(&val)?))
    } else {
        (None, None)
    };
    let mut transitions = BTreeMap::new();
    let mut mean_exponent_change = BTreeMap::new();
    for name in ["exponent_w1", "exponent_w2", "exponent_act"] {
        if let Some(s) = rec.0.get(name) {
            transitions.insert(name.to_string(), metric_scale_transitions(s));
            mean_exponent_change.insert(name.to_string(), metric_mean_exponent_change(s));
        }
    }
    let final_second_moment_ratio = rec.0.get("second_moment_ratio").and_then(|s| s.last());
    Ok(QatRun {
        summary: QatSummary {
            final_train_accuracy,
            final_val_accuracy,
            diverged_at,
            steps_completed,
            transitions,
            mean_exponent_change,
            final_second_moment_ratio,
        },
        series: rec.0.into_values().collect(),
        model,
    })
}
