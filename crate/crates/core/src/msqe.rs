//! Least-squares fitting of power-of-two scales to minimize the (optionally
//! weighted) squared quantization error.
//!
//! The basic fit alternates between quantizing with the current step and
//! solving the one-dimensional regression `step = q.w / q.q` for the codes
//! `q`, projecting each solution onto the nearest power of two. A local
//! exhaustive search over neighbouring exponents then repairs the cases
//! where that alternation settles on a sub-optimal power of two.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::quant::{codes_with_step, msqe_at, po2_project, Po2Scale, QuantConfig};
use crate::tensor::Tensor;

pub const DEFAULT_N_ITERS: usize = 2;
pub const DEFAULT_LINE_SEARCH_RANGE: usize = 2;
pub const DEFAULT_SIGMA_OUTLIER: f64 = 2.0;
pub const DEFAULT_GVA_DECAY: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsqeFitConfig {
    pub n_iters: usize,
    /// Exponent radius of the local search; 0 disables it.
    pub line_search_range: usize,
    /// Outlier threshold in standard deviations; `None` disables masking.
    /// Serialized as a number or the string `"inf"`.
    #[serde(with = "sigma_serde")]
    pub sigma_outlier: Option<f64>,
    pub use_gva: bool,
}

mod sigma_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Token(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_some(x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Number(x)) => Ok(Some(x)),
            Some(Repr::Token(t)) => t
                .parse::<f64>()
                .map(Some)
                .map_err(|_| serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

impl Default for MsqeFitConfig {
    fn default() -> Self {
        Self {
            n_iters: DEFAULT_N_ITERS,
            line_search_range: DEFAULT_LINE_SEARCH_RANGE,
            sigma_outlier: None,
            use_gva: false,
        }
    }
}

impl MsqeFitConfig {
    /// The unmodified least-squares baseline without local search.
    pub fn baseline() -> Self {
        Self {
            line_search_range: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(QuantError::InvalidConfig("n_iters must be at least 1".into()));
        }
        if let Some(s) = self.sigma_outlier {
            if !(s > 0.0) {
                return Err(QuantError::InvalidConfig(format!(
                    "sigma_outlier must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// One pass of the regression loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitIteration {
    /// `q.w`
    pub numerator: f64,
    /// `q.q`
    pub denominator: f64,
    /// Unconstrained least-squares step `numerator / denominator`.
    pub delta: f64,
    pub scale: Po2Scale,
}

fn validate_fit_inputs(w: &Tensor, delta_init: f64, n_iters: usize) -> Result<()> {
    if w.is_empty() {
        return Err(QuantError::InvalidShape("cannot fit an empty tensor".into()));
    }
    if n_iters == 0 {
        return Err(QuantError::InvalidConfig("n_iters must be at least 1".into()));
    }
    if !(delta_init.is_finite() && delta_init > 0.0) {
        return Err(QuantError::Domain(delta_init));
    }
    w.ensure_finite()
}

fn regression_step(numerator: f64, denominator: f64, current: f64) -> Result<(f64, Po2Scale)> {
    if denominator == 0.0 {
        return Err(QuantError::DegenerateCodes { delta: current });
    }
    let delta = numerator / denominator;
    if !(delta > 0.0) {
        return Err(QuantError::NonPositiveScale(delta));
    }
    Ok((delta, po2_project(delta)?))
}

/// Runs the regression loop and records every iteration.
pub fn fit_scale_msqe_trace(
    w: &Tensor,
    delta_init: f64,
    n_iters: usize,
    cfg: &QuantConfig,
) -> Result<Vec<FitIteration>> {
    validate_fit_inputs(w, delta_init, n_iters)?;
    let mut step = delta_init;
    let mut q = codes_with_step(w, step, cfg)?;
    let mut trace = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let (num, den) = q
            .data()
            .iter()
            .zip(w.data())
            .fold((0.0, 0.0), |(n, d), (&q, &x)| (n + q * x, d + q * q));
        let (delta, scale) = regression_step(num, den, step)?;
        trace.push(FitIteration {
            numerator: num,
            denominator: den,
            delta,
            scale,
        });
        step = scale.value();
        q = codes_with_step(w, step, cfg)?;
    }
    Ok(trace)
}

/// Power-of-two step from `n_iters` rounds of least squares starting at
/// `delta_init`.
pub fn fit_scale_msqe(
    w: &Tensor,
    delta_init: f64,
    n_iters: usize,
    cfg: &QuantConfig,
) -> Result<Po2Scale> {
    let trace = fit_scale_msqe_trace(w, delta_init, n_iters, cfg)?;
    Ok(trace.last().expect("n_iters >= 1").scale)
}

fn validate_weights(w: &Tensor, f: &Tensor) -> Result<()> {
    w.ensure_same_shape(f)?;
    let mut total = 0.0;
    for (i, &v) in f.data().iter().enumerate() {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(QuantError::InvalidWeights(format!(
                "weight {i} is {v}; weights must be finite and nonnegative"
            )));
        }
        total += v;
    }
    if total <= 0.0 {
        return Err(QuantError::InvalidWeights("all weights are zero".into()));
    }
    Ok(())
}

/// Weighted variant of [`fit_scale_msqe_trace`].
///
/// Both the codes and the weights are scaled by `sqrt(f_msqe)` before each
/// regression, which turns the fit into a weighted least-squares problem.
/// The codes are always recomputed from the unscaled `w`.
pub fn weighted_fit_scale_trace(
    w: &Tensor,
    delta_init: f64,
    n_iters: usize,
    f_msqe: &Tensor,
    cfg: &QuantConfig,
) -> Result<Vec<FitIteration>> {
    validate_fit_inputs(w, delta_init, n_iters)?;
    validate_weights(w, f_msqe)?;
    let root: Vec<f64> = f_msqe.data().iter().map(|f| f.sqrt()).collect();
    let w_scaled: Vec<f64> = w.data().iter().zip(&root).map(|(x, r)| x * r).collect();

    let mut step = delta_init;
    let mut q_scaled: Vec<f64> = codes_with_step(w, step, cfg)?
        .data()
        .iter()
        .zip(&root)
        .map(|(q, r)| q * r)
        .collect();
    let mut trace = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let (num, den) = q_scaled
            .iter()
            .zip(&w_scaled)
            .fold((0.0, 0.0), |(n, d), (&q, &x)| (n + q * x, d + q * q));
        let (delta, scale) = regression_step(num, den, step)?;
        trace.push(FitIteration {
            numerator: num,
            denominator: den,
            delta,
            scale,
        });
        step = scale.value();
        let codes = codes_with_step(w, step, cfg)?;
        for ((qs, &c), r) in q_scaled.iter_mut().zip(codes.data()).zip(&root) {
            *qs = c * r;
        }
    }
    Ok(trace)
}

pub fn weighted_fit_scale(
    w: &Tensor,
    delta_init: f64,
    n_iters: usize,
    f_msqe: &Tensor,
    cfg: &QuantConfig,
) -> Result<Po2Scale> {
    let trace = weighted_fit_scale_trace(w, delta_init, n_iters, f_msqe, cfg)?;
    Ok(trace.last().expect("n_iters >= 1").scale)
}

/// Exhaustive search over `init.exponent +- n_range` for the lowest
/// (weighted) MSQE. Ties go to the smaller exponent.
pub fn line_search(
    w: &Tensor,
    init: Po2Scale,
    n_range: usize,
    cfg: &QuantConfig,
    weights: Option<&Tensor>,
) -> Result<Po2Scale> {
    if let Some(f) = weights {
        w.ensure_same_shape(f)?;
    }
    let radius = i32::try_from(n_range)
        .map_err(|_| QuantError::InvalidConfig(format!("line search range {n_range} too large")))?;
    let mut best: Option<(f64, Po2Scale)> = None;
    for offset in -radius..=radius {
        // Candidates outside the representable exponent range are skipped.
        let Ok(candidate) = init.shifted(offset) else {
            continue;
        };
        let err = msqe_at(w, candidate, cfg, weights)?;
        match best {
            Some((b, _)) if !(err < b) => {}
            _ => best = Some((err, candidate)),
        }
    }
    Ok(best.map(|(_, s)| s).unwrap_or(init))
}

/// 1 where `|w| < sigma_outlier * std(w)`, else 0. `std` is the population
/// standard deviation; a constant tensor has no outliers.
pub fn outlier_mask(w: &Tensor, sigma_outlier: f64) -> Tensor {
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || sigma_outlier.is_infinite() {
        return w.map(|_| 1.0);
    }
    let threshold = sigma_outlier * std;
    w.map(|x| if x.abs() < threshold { 1.0 } else { 0.0 })
}

/// Running average of squared weight gradients (diagonal empirical Fisher).
#[derive(Debug, Clone, PartialEq)]
pub struct GvaState {
    v: Tensor,
    decay: f64,
    step_count: u64,
}

impl GvaState {
    pub fn new(shape: &[usize], decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(QuantError::InvalidConfig(format!(
                "decay must lie in (0, 1), got {decay}"
            )));
        }
        Ok(Self {
            v: Tensor::zeros(shape)?,
            decay,
            step_count: 0,
        })
    }

    /// Restores a state from saved moments.
    pub fn from_moments(v: Tensor, decay: f64, step_count: u64) -> Result<Self> {
        let mut state = Self::new(v.shape(), decay)?;
        if let Some((i, &x)) = v.data().iter().enumerate().find(|(_, x)| !(**x >= 0.0)) {
            return Err(QuantError::InvalidWeights(format!(
                "second moment {i} is {x}; must be nonnegative"
            )));
        }
        state.v = v;
        state.step_count = step_count;
        Ok(state)
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn update_in_place(&mut self, grad: &Tensor) -> Result<()> {
        self.v.ensure_same_shape(grad)?;
        grad.ensure_finite()?;
        let d = self.decay;
        for (v, g) in self.v.data_mut().iter_mut().zip(grad.data()) {
            *v = d * *v + (1.0 - d) * g * g;
        }
        self.step_count += 1;
        Ok(())
    }
}

pub fn gva_update(state: &GvaState, grad: &Tensor) -> Result<GvaState> {
    let mut next = state.clone();
    next.update_in_place(grad)?;
    Ok(next)
}

/// Per-element fitting weights from the second moments, multiplied by
/// `mask` when given. Before the first gradient arrives the moments carry
/// no information and uniform weights are used instead.
pub fn gva_msqe_weights(state: &GvaState, mask: Option<&Tensor>) -> Result<Tensor> {
    let base = if state.step_count == 0 {
        state.v.map(|_| 1.0)
    } else {
        state.v.clone()
    };
    match mask {
        None => Ok(base),
        Some(m) => base.zip_map(m, |v, m| v * m),
    }
}

/// Result of one full MSQE quantizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub scale: Po2Scale,
    /// Unconstrained step the fit started from.
    pub delta_init: f64,
    /// MSQE at `po2_project(delta_init)`.
    pub msqe_init: f64,
    /// MSQE after the regression loop, before the local search.
    pub msqe_fit: f64,
    pub msqe_final: f64,
    pub clip_fraction: f64,
    /// Whether any element weighting (mask or second moments) was applied.
    pub weighted: bool,
}

/// Fitting weights combining the outlier mask and the second moments as
/// configured; `None` means uniform.
pub fn fit_weights(
    w: &Tensor,
    cfg: &MsqeFitConfig,
    gva: Option<&GvaState>,
) -> Result<Option<Tensor>> {
    let mask = cfg.sigma_outlier.map(|s| outlier_mask(w, s));
    let weights = match (cfg.use_gva, gva) {
        (true, Some(state)) => Some(gva_msqe_weights(state, mask.as_ref())?),
        _ => mask,
    };
    // An all-zero weighting (every element masked, or all moments decayed
    // to zero) leaves nothing to fit; fall back to uniform weights.
    Ok(weights.filter(|f| f.data().iter().any(|&x| x > 0.0)))
}

/// Full quantizer update: optional weighting, the regression loop, and the
/// optional local search, all sharing the same weights.
pub fn fit_po2_scale(
    w: &Tensor,
    delta_init: f64,
    fit: &MsqeFitConfig,
    gva: Option<&GvaState>,
    cfg: &QuantConfig,
) -> Result<FitReport> {
    fit.validate()?;
    let weights = fit_weights(w, fit, gva)?;
    let init_scale = po2_project(delta_init)?;
    let msqe_init = msqe_at(w, init_scale, cfg, weights.as_ref())?;
    let fitted = match &weights {
        Some(f) => weighted_fit_scale(w, delta_init, fit.n_iters, f, cfg)?,
        None => fit_scale_msqe(w, delta_init, fit.n_iters, cfg)?,
    };
    let msqe_fit = msqe_at(w, fitted, cfg, weights.as_ref())?;
    let scale = if fit.line_search_range > 0 {
        line_search(w, fitted, fit.line_search_range, cfg, weights.as_ref())?
    } else {
        fitted
    };
    let msqe_final = msqe_at(w, scale, cfg, weights.as_ref())?;
    Ok(FitReport {
        scale,
        delta_init,
        msqe_init,
        msqe_fit,
        msqe_final,
        clip_fraction: crate::quant::clip_fraction(w, scale, cfg),
        weighted: weights.is_some(),
    })
}

/// Stateful per-layer MSQE quantizer: each update starts from the
/// previously found scale.
#[derive(Debug, Clone)]
pub struct MsqeQuantizer {
    pub fit: MsqeFitConfig,
    pub cfg: QuantConfig,
    scale: Option<Po2Scale>,
    gva: Option<GvaState>,
}

impl MsqeQuantizer {
    pub fn new(fit: MsqeFitConfig, cfg: QuantConfig) -> Result<Self> {
        fit.validate()?;
        Ok(Self {
            fit,
            cfg,
            scale: None,
            gva: None,
        })
    }

    pub fn scale(&self) -> Option<Po2Scale> {
        self.scale
    }

    pub fn gva(&self) -> Option<&GvaState> {
        self.gva.as_ref()
    }

    /// Initial step when no previous scale exists: the dynamic range mapped
    /// onto the largest code.
    pub fn range_init(w: &Tensor, cfg: &QuantConfig) -> f64 {
        let m = w.max_abs();
        if m > 0.0 {
            m / cfg.q_max() as f64
        } else {
            1.0
        }
    }

    pub fn update(&mut self, w: &Tensor) -> Result<FitReport> {
        if self.fit.use_gva && self.gva.is_none() {
            self.gva = Some(GvaState::new(w.shape(), DEFAULT_GVA_DECAY)?);
        }
        let delta_init = match self.scale {
            Some(s) => s.value(),
            None => Self::range_init(w, &self.cfg),
        };
        let report = fit_po2_scale(w, delta_init, &self.fit, self.gva.as_ref(), &self.cfg)?;
        self.scale = Some(report.scale);
        Ok(report)
    }

    /// Feeds the gradient at the quantizer input into the second-moment
    /// tracker; a no-op unless GVA is enabled.
    pub fn observe_gradient(&mut self, grad: &Tensor) -> Result<()> {
        if let Some(state) = self.gva.as_mut() {
            state.update_in_place(grad)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::msqe_at;

    fn golden_3x3() -> Tensor {
        Tensor::new(
            vec![-0.17, 2.58, -8.75, -3.56, 1.56, -0.15, 2.15, -0.66, 0.49],
            vec![3, 3],
        )
        .unwrap()
    }

    fn s4() -> QuantConfig {
        QuantConfig::signed(4).unwrap()
    }

    #[test]
    fn golden_3x3_regression_ratio() {
        let trace = fit_scale_msqe_trace(&golden_3x3(), 1.0, 2, &s4()).unwrap();
        assert_eq!(trace.len(), 2);
        for it in &trace {
            assert!((it.numerator - 91.31).abs() < 1e-9);
            assert_eq!(it.denominator, 83.0);
            assert!((it.delta - 91.31 / 83.0).abs() < 1e-9);
            assert_eq!(it.scale.exponent(), 0);
        }
    }

    #[test]
    fn golden_3x3_line_search_finds_two() {
        let cfg = s4();
        let w = golden_3x3();
        let fitted = fit_scale_msqe(&w, 1.0, 2, &cfg).unwrap();
        let best = line_search(&w, fitted, 2, &cfg, None).unwrap();
        assert_eq!(best.exponent(), 1);
        assert_eq!(line_search(&w, fitted, 0, &cfg, None).unwrap(), fitted);
    }

    #[test]
    fn lattice_input_is_a_fixed_point() {
        let cfg = s4();
        for e in [-3, 0, 2] {
            let s = Po2Scale::new(e).unwrap();
            let w = Tensor::from_vec(
                [-7.0, -3.0, 0.0, 1.0, 5.0, 7.0]
                    .iter()
                    .map(|k| k * s.value())
                    .collect(),
            );
            assert_eq!(fit_scale_msqe(&w, s.value(), 3, &cfg).unwrap(), s);
        }
    }

    #[test]
    fn degenerate_codes_report_the_step() {
        let w = Tensor::from_vec(vec![0.1, -0.2, 0.05]);
        match fit_scale_msqe(&w, 16.0, 2, &s4()) {
            Err(QuantError::DegenerateCodes { delta }) => assert_eq!(delta, 16.0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(fit_scale_msqe(&w, -1.0, 2, &s4()).is_err());
        assert!(fit_scale_msqe(&w, 1.0, 0, &s4()).is_err());
    }

    #[test]
    fn outlier_mask_examples() {
        let w = Tensor::from_vec(vec![0.1, -0.2, 0.15, 10.0]);
        assert_eq!(outlier_mask(&w, 2.0).data(), &[1.0, 1.0, 1.0, 0.0]);
        let c = Tensor::from_vec(vec![3.0; 5]);
        assert_eq!(outlier_mask(&c, 2.0).data(), &[1.0; 5]);
        assert_eq!(outlier_mask(&w, f64::INFINITY).data(), &[1.0; 4]);
    }

    #[test]
    fn uniform_weights_match_unweighted_fit() {
        let w = golden_3x3();
        let ones = Tensor::ones(w.shape()).unwrap();
        let a = fit_scale_msqe_trace(&w, 1.0, 3, &s4()).unwrap();
        let b = weighted_fit_scale_trace(&w, 1.0, 3, &ones, &s4()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_weight_equals_fit_on_subset() {
        let w = golden_3x3();
        let mut f = Tensor::ones(w.shape()).unwrap();
        f.data_mut()[2] = 0.0;
        let subset = Tensor::from_vec(
            w.data()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 2)
                .map(|(_, &x)| x)
                .collect(),
        );
        for init in [0.25, 0.5, 1.0, 2.0] {
            let weighted = weighted_fit_scale(&w, init, 2, &f, &s4()).unwrap();
            let oracle = fit_scale_msqe(&subset, init, 2, &s4()).unwrap();
            assert_eq!(weighted, oracle, "init {init}");
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = golden_3x3();
        let zeros = Tensor::zeros(w.shape()).unwrap();
        assert!(matches!(
            weighted_fit_scale(&w, 1.0, 2, &zeros, &s4()),
            Err(QuantError::InvalidWeights(_))
        ));
        let mut neg = Tensor::ones(w.shape()).unwrap();
        neg.data_mut()[0] = -1.0;
        assert!(weighted_fit_scale(&w, 1.0, 2, &neg, &s4()).is_err());
    }

    #[test]
    fn gva_update_examples() {
        let g = Tensor::from_vec(vec![2.0, -1.0]);
        let s = GvaState::new(&[2], 0.99).unwrap();
        let s1 = gva_update(&s, &g).unwrap();
        assert!((s1.v().data()[0] - 0.04).abs() < 1e-15);
        assert!((s1.v().data()[1] - 0.01).abs() < 1e-15);
        assert_eq!(s1.step_count(), 1);

        let zero = Tensor::zeros(&[2]).unwrap();
        let mut s = s1.clone();
        for _ in 0..50 {
            s = gva_update(&s, &zero).unwrap();
        }
        let expected = 0.04 * 0.99f64.powi(50);
        assert!((s.v().data()[0] - expected).abs() < 1e-15);

        let mut s = GvaState::new(&[2], 0.99).unwrap();
        for _ in 0..5000 {
            s.update_in_place(&g).unwrap();
        }
        assert!((s.v().data()[0] - 4.0).abs() < 1e-12);

        assert!(gva_update(&s, &Tensor::zeros(&[3]).unwrap()).is_err());
        assert!(GvaState::new(&[2], 1.0).is_err());
    }

    #[test]
    fn gva_weights_cold_start_and_mask() {
        let s = GvaState::new(&[3], 0.99).unwrap();
        assert_eq!(gva_msqe_weights(&s, None).unwrap().data(), &[1.0; 3]);
        let s = gva_update(&s, &Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let mask = Tensor::from_vec(vec![1.0, 0.0, 1.0]);
        let f = gva_msqe_weights(&s, Some(&mask)).unwrap();
        assert!((f.data()[0] - 0.01).abs() < 1e-15);
        assert_eq!(f.data()[1], 0.0);
    }

    #[test]
    fn uniform_moments_reduce_to_unweighted() {
        let w = golden_3x3();
        let s = GvaState::from_moments(Tensor::filled(w.shape(), 0.3).unwrap(), 0.99, 10).unwrap();
        let f = gva_msqe_weights(&s, None).unwrap();
        let weighted = weighted_fit_scale(&w, 1.0, 2, &f, &s4()).unwrap();
        assert_eq!(weighted, fit_scale_msqe(&w, 1.0, 2, &s4()).unwrap());
    }

    #[test]
    fn fit_report_orders_errors() {
        let w = golden_3x3();
        let fit = MsqeFitConfig::default();
        let r = fit_po2_scale(&w, 1.0, &fit, None, &s4()).unwrap();
        assert_eq!(r.scale.exponent(), 1);
        assert!(r.msqe_final <= r.msqe_fit);
        assert!((r.msqe_final - msqe_at(&w, r.scale, &s4(), None).unwrap()).abs() < 1e-15);
        assert!((r.clip_fraction - 0.0).abs() < 1e-15);
    }

    #[test]
    fn quantizer_reuses_previous_scale() {
        let w = golden_3x3();
        let mut q = MsqeQuantizer::new(MsqeFitConfig::baseline(), s4()).unwrap();
        let first = q.update(&w).unwrap();
        let second = q.update(&w).unwrap();
        assert_eq!(second.delta_init, first.scale.value());
    }
}
