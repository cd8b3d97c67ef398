//! Uniform symmetric per-tensor quantization with power-of-two steps.
//!
//! `Q(w, step) = step * clip(round(w / step), q_min, q_max)`, with `round`
//! resolving ties away from zero everywhere in this crate.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::tensor::{IntTensor, Tensor};

pub const MIN_EXPONENT: i32 = -60;
pub const MAX_EXPONENT: i32 = 60;
/// Codes above 32 bits stop being exactly representable in products of f64.
pub const MAX_BIT_WIDTH: u32 = 32;

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Integer code range for a bit width.
///
/// Signed ranges are symmetric, `[-2^(bw-1) + 1, 2^(bw-1) - 1]`, so that
/// both signs get the same number of levels.
pub fn qrange(bit_width: u32, signed: bool) -> Result<(i64, i64)> {
    if bit_width < 2 {
        return Err(QuantError::InvalidConfig(format!(
            "bit width must be at least 2, got {bit_width}"
        )));
    }
    if bit_width > MAX_BIT_WIDTH {
        return Err(QuantError::InvalidConfig(format!(
            "bit width must be at most {MAX_BIT_WIDTH}, got {bit_width}"
        )));
    }
    Ok(if signed {
        let half = 1i64 << (bit_width - 1);
        (-half + 1, half - 1)
    } else {
        (0, (1i64 << bit_width) - 1)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "QuantConfigSpec", into = "QuantConfigSpec")]
pub struct QuantConfig {
    bit_width: u32,
    signed: bool,
    q_min: i64,
    q_max: i64,
}

#[derive(Serialize, Deserialize)]
struct QuantConfigSpec {
    bits: u32,
    signed: bool,
}

impl TryFrom<QuantConfigSpec> for QuantConfig {
    type Error = QuantError;
    fn try_from(s: QuantConfigSpec) -> Result<Self> {
        QuantConfig::new(s.bits, s.signed)
    }
}

impl From<QuantConfig> for QuantConfigSpec {
    fn from(c: QuantConfig) -> Self {
        QuantConfigSpec {
            bits: c.bit_width,
            signed: c.signed,
        }
    }
}

impl QuantConfig {
    pub fn new(bit_width: u32, signed: bool) -> Result<Self> {
        let (q_min, q_max) = qrange(bit_width, signed)?;
        Ok(Self {
            bit_width,
            signed,
            q_min,
            q_max,
        })
    }

    pub fn signed(bit_width: u32) -> Result<Self> {
        Self::new(bit_width, true)
    }

    pub fn unsigned(bit_width: u32) -> Result<Self> {
        Self::new(bit_width, false)
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn q_min(&self) -> i64 {
        self.q_min
    }

    pub fn q_max(&self) -> i64 {
        self.q_max
    }

    pub fn range(&self) -> (i64, i64) {
        (self.q_min, self.q_max)
    }

    /// `clip(round(x), q_min, q_max)` as a real.
    #[inline]
    pub fn code(&self, x: f64) -> f64 {
        round_half_away(x).clamp(self.q_min as f64, self.q_max as f64)
    }

    #[inline]
    pub fn contains(&self, code: f64) -> bool {
        code >= self.q_min as f64 && code <= self.q_max as f64
    }
}

/// A step size constrained to `2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub struct Po2Scale {
    exponent: i32,
}

impl TryFrom<i32> for Po2Scale {
    type Error = QuantError;
    fn try_from(e: i32) -> Result<Self> {
        Po2Scale::new(e)
    }
}

impl From<Po2Scale> for i32 {
    fn from(s: Po2Scale) -> i32 {
        s.exponent
    }
}

impl Po2Scale {
    pub fn new(exponent: i32) -> Result<Self> {
        if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&exponent) {
            return Err(QuantError::ExponentOutOfRange(exponent as f64));
        }
        Ok(Self { exponent })
    }

    /// Builds a scale from an already-integral real exponent, e.g. the output
    /// of `ceil`, `floor` or `round` on a log2 value.
    pub fn from_integral(exponent: f64) -> Result<Self> {
        if !exponent.is_finite()
            || exponent < MIN_EXPONENT as f64
            || exponent > MAX_EXPONENT as f64
        {
            return Err(QuantError::ExponentOutOfRange(exponent));
        }
        debug_assert_eq!(exponent.fract(), 0.0);
        Ok(Self {
            exponent: exponent as i32,
        })
    }

    pub const fn unit() -> Self {
        Self { exponent: 0 }
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn value(&self) -> f64 {
        2f64.powi(self.exponent)
    }

    /// Scale shifted by `offset` exponent steps.
    pub fn shifted(&self, offset: i32) -> Result<Self> {
        Self::new(self.exponent.saturating_add(offset))
    }
}

/// Nearest power of two in the log domain: `2^round(log2(delta))`.
pub fn po2_project(delta: f64) -> Result<Po2Scale> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(QuantError::Domain(delta));
    }
    Po2Scale::from_integral(round_half_away(delta.log2()))
}

fn ensure_step(step: f64) -> Result<()> {
    if step.is_finite() && step > 0.0 {
        Ok(())
    } else {
        Err(QuantError::Domain(step))
    }
}

/// Quantizes with an arbitrary positive step. Algorithm-1 style fits start
/// from a step that need not be a power of two.
pub fn quantize_with_step(w: &Tensor, step: f64, cfg: &QuantConfig) -> Result<Tensor> {
    ensure_step(step)?;
    w.ensure_finite()?;
    Ok(w.map(|x| step * cfg.code(x / step)))
}

/// Integer codes `clip(round(w / step))` for an arbitrary positive step.
pub fn codes_with_step(w: &Tensor, step: f64, cfg: &QuantConfig) -> Result<Tensor> {
    ensure_step(step)?;
    w.ensure_finite()?;
    Ok(w.map(|x| cfg.code(x / step)))
}

pub fn quantize(w: &Tensor, scale: Po2Scale, cfg: &QuantConfig) -> Result<Tensor> {
    quantize_with_step(w, scale.value(), cfg)
}

pub fn quant_codes(w: &Tensor, scale: Po2Scale, cfg: &QuantConfig) -> Result<IntTensor> {
    let codes = codes_with_step(w, scale.value(), cfg)?;
    let shape = codes.shape().to_vec();
    IntTensor::new(codes.data().iter().map(|&c| c as i64).collect(), shape)
}

/// Fraction of elements whose rounded code falls outside `[q_min, q_max]`.
pub fn clip_fraction(w: &Tensor, scale: Po2Scale, cfg: &QuantConfig) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let step = scale.value();
    let clipped = w
        .data()
        .iter()
        .filter(|&&x| !cfg.contains(round_half_away(x / step)))
        .count();
    clipped as f64 / w.len() as f64
}

/// Sum of squared residuals, optionally weighted element-wise:
/// `sum_j f_j * (w_q,j - w_j)^2`.
pub fn msqe(w: &Tensor, w_q: &Tensor, weights: Option<&Tensor>) -> Result<f64> {
    w.ensure_same_shape(w_q)?;
    match weights {
        None => Ok(w
            .data()
            .iter()
            .zip(w_q.data())
            .map(|(&a, &b)| (b - a) * (b - a))
            .sum()),
        Some(f) => {
            w.ensure_same_shape(f)?;
            if let Some((i, &v)) = f.data().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                return Err(QuantError::InvalidWeights(format!(
                    "weight {i} is {v}; weights must be nonnegative"
                )));
            }
            Ok(w.data()
                .iter()
                .zip(w_q.data())
                .zip(f.data())
                .map(|((&a, &b), &f)| f * (b - a) * (b - a))
                .sum())
        }
    }
}

/// MSQE of `w` against its own quantization at `scale`.
pub fn msqe_at(
    w: &Tensor,
    scale: Po2Scale,
    cfg: &QuantConfig,
    weights: Option<&Tensor>,
) -> Result<f64> {
    let w_q = quantize(w, scale, cfg)?;
    msqe(w, &w_q, weights)
}

/// Batch-normalization statistics and affine parameters, one entry per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
    pub epsilon: f64,
}

impl BnParams {
    pub fn new(
        gamma: Vec<f64>,
        beta: Vec<f64>,
        moving_mean: Vec<f64>,
        moving_var: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let n = gamma.len();
        if beta.len() != n || moving_mean.len() != n || moving_var.len() != n {
            return Err(QuantError::InvalidConfig(format!(
                "batch-norm arrays differ in length: gamma {n}, beta {}, mean {}, var {}",
                beta.len(),
                moving_mean.len(),
                moving_var.len()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(QuantError::InvalidConfig(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if let Some(v) = moving_var.iter().find(|&&v| !(v >= 0.0)) {
            return Err(QuantError::InvalidConfig(format!(
                "moving variance must be nonnegative, got {v}"
            )));
        }
        Ok(Self {
            gamma,
            beta,
            moving_mean,
            moving_var,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel multiplier `gamma / sqrt(var + eps)`.
    pub fn channel_scale(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.moving_var)
            .map(|(&g, &v)| g / (v + self.epsilon).sqrt())
            .collect()
    }
}

/// Folds batch normalization into the preceding linear layer.
///
/// `weight` has the output channel on axis 0 (dense `[out, in]` or conv
/// `[out, in, kh, kw]`); `bias` has one entry per output channel.
pub fn fold_batchnorm(weight: &Tensor, bias: &Tensor, bn: &BnParams) -> Result<(Tensor, Tensor)> {
    let out = *weight
        .shape()
        .first()
        .ok_or_else(|| QuantError::InvalidShape("weight must have rank >= 1".into()))?;
    if out != bn.channels() {
        return Err(QuantError::ShapeMismatch {
            expected: vec![bn.channels()],
            found: vec![out],
        });
    }
    if bias.len() != out {
        return Err(QuantError::ShapeMismatch {
            expected: vec![out],
            found: bias.shape().to_vec(),
        });
    }
    let scale = bn.channel_scale();
    let row = weight.len() / out;
    let mut folded_w = weight.clone();
    for (c, chunk) in folded_w.data_mut().chunks_mut(row).enumerate() {
        for x in chunk {
            *x *= scale[c];
        }
    }
    let folded_b = Tensor::new(
        (0..out)
            .map(|c| bn.beta[c] + scale[c] * (bias.data()[c] - bn.moving_mean[c]))
            .collect(),
        bias.shape().to_vec(),
    )?;
    Ok((folded_w, folded_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golden_3x3() -> Tensor {
        Tensor::new(
            vec![-0.17, 2.58, -8.75, -3.56, 1.56, -0.15, 2.15, -0.66, 0.49],
            vec![3, 3],
        )
        .unwrap()
    }

    #[test]
    fn qrange_examples() {
        assert_eq!(qrange(4, true).unwrap(), (-7, 7));
        assert_eq!(qrange(8, false).unwrap(), (0, 255));
        assert_eq!(qrange(2, true).unwrap(), (-1, 1));
        assert!(matches!(qrange(1, true), Err(QuantError::InvalidConfig(_))));
        assert!(qrange(0, false).is_err());
    }

    #[test]
    fn quantize_examples() {
        let cfg = QuantConfig::signed(4).unwrap();
        let w = Tensor::from_vec(vec![-8.75, 2.58, 0.0]);
        let q = quantize(&w, Po2Scale::unit(), &cfg).unwrap();
        assert_eq!(q.data(), &[-7.0, 3.0, 0.0]);
        let u = QuantConfig::unsigned(3).unwrap();
        for e in [-5, 0, 7] {
            let z = quantize(&Tensor::from_vec(vec![0.0]), Po2Scale::new(e).unwrap(), &u).unwrap();
            assert_eq!(z.data(), &[0.0]);
        }
    }

    #[test]
    fn quantize_rejects_nan() {
        let cfg = QuantConfig::signed(4).unwrap();
        let w = Tensor::from_vec(vec![1.0, f64::NAN]);
        assert!(matches!(
            quantize(&w, Po2Scale::unit(), &cfg),
            Err(QuantError::NonFinite { index: 1, .. })
        ));
        let w = Tensor::from_vec(vec![f64::INFINITY]);
        assert!(quant_codes(&w, Po2Scale::unit(), &cfg).is_err());
    }

    #[test]
    fn golden_3x3_codes() {
        let cfg = QuantConfig::signed(4).unwrap();
        let codes = quant_codes(&golden_3x3(), Po2Scale::unit(), &cfg).unwrap();
        assert_eq!(codes.data(), &[0, 3, -7, -4, 2, 0, 2, -1, 0]);
        assert_eq!(codes.shape(), &[3, 3]);
    }

    #[test]
    fn code_half_step_example() {
        let cfg = QuantConfig::signed(4).unwrap();
        let w = Tensor::from_vec(vec![0.74]);
        let c = quant_codes(&w, Po2Scale::new(-1).unwrap(), &cfg).unwrap();
        assert_eq!(c.data(), &[1]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let cfg = QuantConfig::signed(8).unwrap();
        let w = Tensor::from_vec(vec![0.5, -0.5, 1.5, -2.5]);
        let c = quant_codes(&w, Po2Scale::unit(), &cfg).unwrap();
        assert_eq!(c.data(), &[1, -1, 2, -3]);
        assert_eq!(po2_project(2f64.powf(0.5)).unwrap().exponent(), 1);
        assert_eq!(po2_project(2f64.powf(-0.51)).unwrap().exponent(), -1);
        assert_eq!(po2_project(2f64.powf(-0.49)).unwrap().exponent(), 0);
    }

    #[test]
    fn po2_project_examples() {
        assert_eq!(po2_project(91.31 / 83.0).unwrap().exponent(), 0);
        assert_eq!(po2_project(1.0).unwrap().exponent(), 0);
        let s = po2_project(3.0).unwrap();
        assert_eq!((s.exponent(), s.value()), (2, 4.0));
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(po2_project(bad), Err(QuantError::Domain(_))));
        }
        assert!(matches!(
            po2_project(2f64.powi(70)),
            Err(QuantError::ExponentOutOfRange(_))
        ));
    }

    #[test]
    fn msqe_golden_table() {
        // Exact rational evaluation of the residual sums (done offline).
        let golden = [(-1, 27.6757), (0, 4.0557), (1, 2.0357), (2, 9.3557)];
        let cfg = QuantConfig::signed(4).unwrap();
        let w = golden_3x3();
        for (e, expected) in golden {
            let got = msqe_at(&w, Po2Scale::new(e).unwrap(), &cfg, None).unwrap();
            assert!((got - expected).abs() < 1e-9, "exponent {e}: {got} vs {expected}");
        }
        let m1 = msqe_at(&w, Po2Scale::new(0).unwrap(), &cfg, None).unwrap();
        let m2 = msqe_at(&w, Po2Scale::new(1).unwrap(), &cfg, None).unwrap();
        assert!(m2 < m1);
        assert_eq!(msqe(&w, &w, None).unwrap(), 0.0);
    }

    #[test]
    fn msqe_weighted_and_errors() {
        let w = Tensor::from_vec(vec![0.0, 1.0]);
        let q = Tensor::from_vec(vec![1.0, 3.0]);
        let f = Tensor::from_vec(vec![2.0, 0.5]);
        assert_eq!(msqe(&w, &q, Some(&f)).unwrap(), 2.0 + 2.0);
        assert!(msqe(&w, &Tensor::from_vec(vec![1.0]), None).is_err());
        let neg = Tensor::from_vec(vec![-1.0, 0.0]);
        assert!(matches!(msqe(&w, &q, Some(&neg)), Err(QuantError::InvalidWeights(_))));
    }

    #[test]
    fn fold_examples() {
        let w = Tensor::new(vec![1.0, -2.0, 3.0, 0.5], vec![2, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.25, -1.0]);
        let eps = 1e-3;
        let id = BnParams::new(vec![1.0; 2], vec![0.0; 2], vec![0.0; 2], vec![1.0 - eps; 2], eps)
            .unwrap();
        let (fw, fb) = fold_batchnorm(&w, &b, &id).unwrap();
        for (a, e) in fw.data().iter().zip(w.data()) {
            assert!((a - e).abs() < 1e-15);
        }
        for (a, e) in fb.data().iter().zip(b.data()) {
            assert!((a - e).abs() < 1e-15);
        }

        let bn = BnParams::new(vec![2.0; 2], vec![0.0; 2], vec![0.0; 2], vec![3.0; 2], 1.0).unwrap();
        let (fw, _) = fold_batchnorm(&w, &b, &bn).unwrap();
        assert_eq!(fw.data(), w.data());

        let bad = BnParams::new(vec![1.0; 3], vec![0.0; 3], vec![0.0; 3], vec![1.0; 3], 1e-5).unwrap();
        assert!(matches!(
            fold_batchnorm(&w, &b, &bad),
            Err(QuantError::ShapeMismatch { .. })
        ));
        assert!(BnParams::new(vec![1.0], vec![0.0, 1.0], vec![0.0], vec![1.0], 1e-5).is_err());
    }

    fn arb_cfg() -> impl Strategy<Value = QuantConfig> {
        (2u32..=12, any::<bool>()).prop_map(|(b, s)| QuantConfig::new(b, s).unwrap())
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(
            data in prop::collection::vec(-1e6f64..1e6, 1..64),
            e in -20i32..20,
            cfg in arb_cfg(),
        ) {
            let s = Po2Scale::new(e).unwrap();
            let w = Tensor::from_vec(data);
            let once = quantize(&w, s, &cfg).unwrap();
            let twice = quantize(&once, s, &cfg).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn codes_stay_in_range_and_reconstruct(
            data in prop::collection::vec(-1e6f64..1e6, 1..64),
            e in -20i32..20,
            cfg in arb_cfg(),
        ) {
            let s = Po2Scale::new(e).unwrap();
            let w = Tensor::from_vec(data);
            let codes = quant_codes(&w, s, &cfg).unwrap();
            let q = quantize(&w, s, &cfg).unwrap();
            for (&c, &x) in codes.data().iter().zip(q.data()) {
                prop_assert!(c >= cfg.q_min() && c <= cfg.q_max());
                prop_assert_eq!(s.value() * c as f64, x);
            }
        }

        #[test]
        fn lattice_points_are_fixed(k in -127i64..=127, e in -30i32..30) {
            let cfg = QuantConfig::signed(8).unwrap();
            let s = Po2Scale::new(e).unwrap();
            let w = Tensor::from_vec(vec![k as f64 * s.value()]);
            let codes = quant_codes(&w, s, &cfg).unwrap();
            prop_assert_eq!(codes.data(), &[k]);
        }

        #[test]
        fn po2_projection_fixes_powers(e in -30i32..=30) {
            prop_assert_eq!(po2_project(2f64.powi(e)).unwrap().exponent(), e);
        }

        #[test]
        fn signed_quantization_is_odd(
            data in prop::collection::vec(-1e4f64..1e4, 1..64),
            e in -10i32..10,
            bits in 2u32..12,
        ) {
            let cfg = QuantConfig::signed(bits).unwrap();
            let s = Po2Scale::new(e).unwrap();
            let w = Tensor::from_vec(data);
            let pos = quantize(&w, s, &cfg).unwrap();
            let neg = quantize(&w.map(|x| -x), s, &cfg).unwrap();
            for (a, b) in pos.data().iter().zip(neg.data()) {
                prop_assert_eq!(*a, -*b);
            }
        }
    }
}
