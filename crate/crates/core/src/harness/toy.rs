//! Single-quantizer experiments: a learned log2 scale minimizing
//! `sum (w - Q(w, 2^e))^2` with Adam, on a fixed base input plus optional
//! per-step Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::grad::{
    backward_with_scale, effective_scale, freeze_step, GradScaleState, RoundingMode,
    DEFAULT_EMA_DECAY,
};
use crate::harness::metrics::metric_scale_transitions;
use crate::harness::series::MetricSeries;
use crate::optim::AdamState;
use crate::quant::{clip_fraction, quantize, quantize_with_step, QuantConfig};
use crate::tensor::Tensor;

const NOISE_STREAM: u64 = 0x5eed_0000_0000_0001;
const CALIBRATION_STREAM: u64 = 0x5eed_0000_0000_0002;

/// How the fixed base input is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyInput {
    /// Integers drawn uniformly from the code range: exactly representable
    /// with step 1.
    Lattice,
    /// A Gaussian sample scaled so the noise-averaged scale gradient at step
    /// 1.0 vanishes, i.e. step 1.0 sits at the learned-scale equilibrium.
    Balanced { calibration_draws: usize },
    /// A Gaussian sample scaled so the unconstrained MSQE-optimal step is
    /// `target`.
    ScaledOptimum { target: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyQuantizerExperimentConfig {
    pub n_elements: usize,
    pub noise_sigma: f64,
    /// Starting `delta_log2`; `None` starts from `log2(max|w| / q_max)`.
    pub init_delta_log2: Option<f64>,
    pub steps: usize,
    pub lr: f64,
    pub mode: RoundingMode,
    pub seed: u64,
    /// Step from which the scale is frozen to its running average.
    pub freeze_at: Option<usize>,
    pub bits: u32,
    pub ema_decay: f64,
    pub input: ToyInput,
}

impl Default for ToyQuantizerExperimentConfig {
    fn default() -> Self {
        Self::rtlm_default()
    }
}

impl ToyQuantizerExperimentConfig {
    /// Start just below the ceil boundary at exponent 0 on a balanced input.
    pub fn rtlm_default() -> Self {
        Self {
            n_elements: 1000,
            noise_sigma: 0.05,
            init_delta_log2: Some(-0.01),
            steps: 1000,
            lr: 0.002,
            mode: RoundingMode::Rtlm,
            seed: 0,
            freeze_at: None,
            bits: 4,
            ema_decay: DEFAULT_EMA_DECAY,
            input: ToyInput::Balanced {
                calibration_draws: 128,
            },
        }
    }

    /// Fixed input whose unconstrained optimum is 0.9, between the
    /// power-of-two steps 0.5 and 1.
    pub fn convergence_default() -> Self {
        Self {
            n_elements: 1000,
            noise_sigma: 0.0,
            init_delta_log2: None,
            steps: 3000,
            lr: 0.01,
            mode: RoundingMode::Round,
            seed: 0,
            freeze_at: None,
            bits: 4,
            ema_decay: DEFAULT_EMA_DECAY,
            input: ToyInput::ScaledOptimum { target: 0.9 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(QuantError::InvalidConfig("steps must be at least 1".into()));
        }
        if self.n_elements == 0 {
            return Err(QuantError::InvalidConfig("n_elements must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(QuantError::InvalidConfig(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if !(self.lr > 0.0) {
            return Err(QuantError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        match self.input {
            ToyInput::Balanced { calibration_draws: 0 } => Err(QuantError::InvalidConfig(
                "calibration_draws must be at least 1".into(),
            )),
            ToyInput::ScaledOptimum { target } if !(target > 0.0) => Err(
                QuantError::InvalidConfig(format!("target step must be positive, got {target}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn quant_config(&self) -> Result<QuantConfig> {
        QuantConfig::signed(self.bits)
    }
}

/// Trajectories recorded by one toy run; one entry per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub exponent: MetricSeries,
    pub delta_log2: MetricSeries,
    pub ema_log2: MetricSeries,
    pub msqe: MetricSeries,
    pub clip_fraction: MetricSeries,
    /// Exponent average the state started from.
    pub initial_ema: f64,
    pub transitions: usize,
}

impl ToyRun {
    pub fn series(&self) -> [&MetricSeries; 5] {
        [
            &self.exponent,
            &self.delta_log2,
            &self.ema_log2,
            &self.msqe,
            &self.clip_fraction,
        ]
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Sum over elements of `upstream * g` for the squared-error loss, i.e. the
/// scale gradient before the log2 chain factor.
fn scale_gradient_sum(w: &[f64], step: f64, cfg: &QuantConfig) -> f64 {
    w.iter()
        .map(|&x| {
            let xs = x / step;
            let q = step * cfg.code(xs);
            2.0 * (q - x) * crate::grad::ste_scale_gradient(xs, cfg)
        })
        .sum()
}

/// Unconstrained step minimizing the plain MSQE, found by a log-spaced grid
/// search followed by a finer grid around the best coarse point.
pub fn brute_force_optimal_step(w: &Tensor, cfg: &QuantConfig) -> Result<f64> {
    let m = w.max_abs();
    if !(m > 0.0) {
        return Err(QuantError::Domain(m));
    }
    let base = m / cfg.q_max() as f64;
    let eval = |step: f64| -> Result<f64> {
        let q = quantize_with_step(w, step, cfg)?;
        crate::quant::msqe(w, &q, None)
    };
    let search = |lo: f64, hi: f64, n: usize| -> Result<(f64, f64)> {
        let mut best = (f64::INFINITY, lo);
        for i in 0..=n {
            let step = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / n as f64).exp();
            let e = eval(step)?;
            if e < best.0 {
                best = (e, step);
            }
        }
        Ok(best)
    };
    let n = 2000;
    let (lo, hi) = (base / 8.0, base * 4.0);
    let (_, coarse) = search(lo, hi, n)?;
    let cell = (hi / lo).powf(2.0 / n as f64);
    let (_, fine) = search(coarse / cell, coarse * cell, n)?;
    Ok(fine)
}

/// Builds the fixed base input for `cfg`.
pub fn toy_base_input(cfg: &ToyQuantizerExperimentConfig) -> Result<Tensor> {
    cfg.validate()?;
    let qc = cfg.quant_config()?;
    let n = cfg.n_elements;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.input {
        ToyInput::Lattice => {
            use rand::Rng;
            Ok(Tensor::from_vec(
                (0..n)
                    .map(|_| rng.random_range(qc.q_min()..=qc.q_max()) as f64)
                    .collect(),
            ))
        }
        ToyInput::ScaledOptimum { target } => {
            let z = Tensor::from_vec(gaussian(&mut rng, n));
            let unit_opt = brute_force_optimal_step(&z, &qc)?;
            let c = target / unit_opt;
            Ok(z.map(|x| c * x))
        }
        ToyInput::Balanced { calibration_draws } => {
            let z = gaussian(&mut rng, n);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CALIBRATION_STREAM);
            let draws: Vec<Vec<f64>> = (0..calibration_draws)
                .map(|_| gaussian(&mut noise_rng, n))
                .collect();
            let sigma = cfg.noise_sigma;
            let mut buf = vec![0.0; n];
            let mut mean_gradient = |c: f64| {
                let mut total = 0.0;
                for d in &draws {
                    for ((b, &zi), &e) in buf.iter_mut().zip(&z).zip(d) {
                        *b = c * zi + sigma * e;
                    }
                    total += scale_gradient_sum(&buf, 1.0, &qc);
                }
                total / draws.len() as f64
            };
            // Small inputs only see rounding error (positive gradient, the
            // step wants to shrink); large inputs clip (negative gradient).
            let q_max = qc.q_max() as f64;
            let (mut lo, mut hi) = (q_max / 64.0, q_max * 4.0);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if mean_gradient(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let c = 0.5 * (lo + hi);
            Ok(Tensor::from_vec(z.iter().map(|x| c * x).collect()))
        }
    }
}

/// Runs the learned-scale loop on a prepared base input.
pub fn run_toy_quantizer(cfg: &ToyQuantizerExperimentConfig, base: &Tensor) -> Result<ToyRun> {
    cfg.validate()?;
    let qc = cfg.quant_config()?;
    let init = match cfg.init_delta_log2 {
        Some(d) => d,
        None => {
            let m = base.max_abs();
            if !(m > 0.0) {
                return Err(QuantError::Domain(m));
            }
            (m / qc.q_max() as f64).log2()
        }
    };
    let mut state = GradScaleState::new(init, cfg.mode)?.with_ema_decay(cfg.ema_decay)?;
    let initial_ema = state.ema_log2;
    let mut adam = AdamState::scalar();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);

    let mut run = ToyRun {
        exponent: MetricSeries::new("exponent"),
        delta_log2: MetricSeries::new("delta_log2"),
        ema_log2: MetricSeries::new("ema_log2"),
        msqe: MetricSeries::new("msqe"),
        clip_fraction: MetricSeries::new("clip_fraction"),
        initial_ema,
        transitions: 0,
    };

    let mut w = base.clone();
    for t in 0..cfg.steps {
        if cfg.noise_sigma > 0.0 {
            for (x, &b) in w.data_mut().iter_mut().zip(base.data()) {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                *x = b + cfg.noise_sigma * e;
            }
        }
        if cfg.freeze_at.is_some_and(|f| t >= f) {
            state.freeze()?;
        }
        let observed = effective_scale(&state, &w, None, &qc)?;
        let (next, scale) = freeze_step(&state, observed)?;
        state = next;

        let w_q = quantize(&w, scale, &qc)?;
        let upstream = w_q.zip_map(&w, |q, x| 2.0 * (q - x))?;
        let step = t as u64;
        run.exponent.push(step, scale.exponent() as f64)?;
        run.delta_log2.push(step, state.delta_log2)?;
        run.ema_log2.push(step, state.ema_log2)?;
        run.msqe.push(step, crate::quant::msqe(&w, &w_q, None)?)?;
        run.clip_fraction.push(step, clip_fraction(&w, scale, &qc))?;

        let (_, grad) = backward_with_scale(&w, scale, &state, &upstream, &qc)?;
        if !state.frozen {
            adam.update_scalar(&mut state.delta_log2, grad, cfg.lr)?;
        }
    }
    run.transitions = metric_scale_transitions(&run.exponent);
    Ok(run)
}

/// Perturbation study around the ceil boundary: exponent trajectory of a
/// single learned quantizer under per-step input noise.
pub fn toy_rtlm_experiment(cfg: &ToyQuantizerExperimentConfig) -> Result<ToyRun> {
    let base = toy_base_input(cfg)?;
    run_toy_quantizer(cfg, &base)
}

/// Fixed-input convergence study; with the default input the unfrozen
/// exponent keeps alternating between the two powers of two around 0.9.
pub fn toy_convergence_experiment(cfg: &ToyQuantizerExperimentConfig) -> Result<ToyRun> {
    toy_rtlm_experiment(cfg)
}

/// Whether every window of `window` steps after `warmup` contains both
/// exponents `a` and `b`.
pub fn visits_both(series: &MetricSeries, warmup: usize, window: usize, a: f64, b: f64) -> bool {
    let v = series.values();
    if window == 0 || v.len() < warmup + window {
        return false;
    }
    v[warmup..]
        .windows(window)
        .step_by(window.max(1))
        .all(|w| w.contains(&a) && w.contains(&b))
}

/// Mean transition count per mode over `seeds`, sharing the base input
/// between modes for each seed.
pub fn transition_sweep(
    cfg: &ToyQuantizerExperimentConfig,
    modes: &[RoundingMode],
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<(RoundingMode, Vec<usize>)>> {
    let mut out: Vec<(RoundingMode, Vec<usize>)> = modes.iter().map(|&m| (m, Vec::new())).collect();
    for seed in seeds {
        let seeded = ToyQuantizerExperimentConfig { seed, ..*cfg };
        let base = toy_base_input(&seeded)?;
        for (mode, counts) in out.iter_mut() {
            let run = run_toy_quantizer(&ToyQuantizerExperimentConfig { mode: *mode, ..seeded }, &base)?;
            counts.push(run.transitions);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_input_without_noise_never_moves() {
        for mode in [RoundingMode::Ceil, RoundingMode::Round, RoundingMode::Rtlm] {
            let cfg = ToyQuantizerExperimentConfig {
                noise_sigma: 0.0,
                init_delta_log2: Some(0.0),
                input: ToyInput::Lattice,
                steps: 200,
                mode,
                ..ToyQuantizerExperimentConfig::rtlm_default()
            };
            let run = toy_rtlm_experiment(&cfg).unwrap();
            assert_eq!(run.transitions, 0);
            assert!(run.exponent.values().iter().all(|&e| e == 0.0));
            assert!(run.msqe.values().iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn scaled_optimum_hits_target() {
        let cfg = ToyQuantizerExperimentConfig::convergence_default();
        let base = toy_base_input(&cfg).unwrap();
        let opt = brute_force_optimal_step(&base, &cfg.quant_config().unwrap()).unwrap();
        assert!((opt - 0.9).abs() <= 0.02, "optimum {opt}");
    }

    #[test]
    fn freeze_holds_exponent() {
        let cfg = ToyQuantizerExperimentConfig {
            steps: 1200,
            freeze_at: Some(1000),
            ..ToyQuantizerExperimentConfig::convergence_default()
        };
        let run = toy_convergence_experiment(&cfg).unwrap();
        let after = &run.exponent.values()[1000..];
        assert!(after.iter().all(|&e| e == after[0]));
        assert!(run.delta_log2.values()[1000..].windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = ToyQuantizerExperimentConfig {
            steps: 100,
            n_elements: 200,
            input: ToyInput::Balanced { calibration_draws: 8 },
            ..ToyQuantizerExperimentConfig::rtlm_default()
        };
        assert_eq!(toy_rtlm_experiment(&cfg).unwrap(), toy_rtlm_experiment(&cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = ToyQuantizerExperimentConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(toy_rtlm_experiment(&bad).is_err());
        let bad = ToyQuantizerExperimentConfig {
            noise_sigma: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
