//! Learned power-of-two scale trained in the log2 domain.
//!
//! The trainable parameter is the unconstrained exponent `delta_log2`. The
//! step actually used is `2^ceil(delta_log2)`, `2^round(delta_log2)` or the
//! lower-error neighbour picked by [`rtlm_select`]. Near the end of training
//! the scale can be frozen to the rounded running average of the exponents
//! it has used ([`freeze_step`]).

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::msqe::{gva_msqe_weights, GvaState};
use crate::quant::{quantize, round_half_away, Po2Scale, QuantConfig};
use crate::tensor::Tensor;

pub const DEFAULT_EMA_DECAY: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingMode {
    Ceil,
    Round,
    /// Round to whichever neighbouring power of two has the lower weighted
    /// MSQE.
    Rtlm,
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoundingMode::Ceil => "ceil",
            RoundingMode::Round => "round",
            RoundingMode::Rtlm => "rtlm",
        })
    }
}

impl FromStr for RoundingMode {
    type Err = QuantError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ceil" => Ok(RoundingMode::Ceil),
            "round" => Ok(RoundingMode::Round),
            "rtlm" => Ok(RoundingMode::Rtlm),
            other => Err(QuantError::InvalidConfig(format!(
                "unknown rounding mode {other:?} (expected ceil, round or rtlm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradScaleState {
    pub delta_log2: f64,
    pub rounding_mode: RoundingMode,
    /// Running average of the exponents actually used.
    pub ema_log2: f64,
    pub ema_decay: f64,
    pub frozen: bool,
    pub last_po2: Po2Scale,
}

impl GradScaleState {
    /// The exponent average starts at `round(delta_log2)`.
    pub fn new(delta_log2: f64, rounding_mode: RoundingMode) -> Result<Self> {
        if !delta_log2.is_finite() {
            return Err(QuantError::Domain(delta_log2));
        }
        let start = round_half_away(delta_log2);
        Ok(Self {
            delta_log2,
            rounding_mode,
            ema_log2: start,
            ema_decay: DEFAULT_EMA_DECAY,
            frozen: false,
            last_po2: Po2Scale::from_integral(start)?,
        })
    }

    /// Initializes `delta_log2 = log2(max|w| / q_max)`.
    pub fn from_range(w: &Tensor, cfg: &QuantConfig, rounding_mode: RoundingMode) -> Result<Self> {
        let m = w.max_abs();
        if !(m > 0.0 && m.is_finite()) {
            return Err(QuantError::Domain(m));
        }
        Self::new((m / cfg.q_max() as f64).log2(), rounding_mode)
    }

    pub fn with_ema_decay(mut self, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(QuantError::InvalidConfig(format!(
                "EMA decay must lie in (0, 1), got {decay}"
            )));
        }
        self.ema_decay = decay;
        Ok(self)
    }

    /// The scale a frozen quantizer uses: `2^round(ema_log2)`.
    pub fn ema_scale(&self) -> Result<Po2Scale> {
        Po2Scale::from_integral(round_half_away(self.ema_log2))
    }

    /// Switches to the averaged exponent; later updates leave the state
    /// untouched.
    pub fn freeze(&mut self) -> Result<()> {
        if !self.frozen {
            self.last_po2 = self.ema_scale()?;
            self.frozen = true;
        }
        Ok(())
    }
}

/// Elements strictly inside the clipping threshold of the unconstrained
/// step: 1 where `|w| < q_max * 2^delta_log2`.
pub fn rtlm_mask(w: &Tensor, delta_log2: f64, cfg: &QuantConfig) -> Tensor {
    let threshold = cfg.q_max() as f64 * delta_log2.exp2();
    w.map(|x| if x.abs() < threshold { 1.0 } else { 0.0 })
}

fn rtlm_error(w: &Tensor, scale: Po2Scale, weight: &[f64], cfg: &QuantConfig) -> Result<f64> {
    let w_q = quantize(w, scale, cfg)?;
    // The weighting multiplies the residual before squaring.
    Ok(w.data()
        .iter()
        .zip(w_q.data())
        .zip(weight)
        .map(|((&x, &q), &f)| {
            let r = f * (q - x);
            r * r
        })
        .sum())
}

/// Picks `2^floor(delta_log2)` or `2^ceil(delta_log2)`, whichever has the
/// lower masked, moment-weighted error. Ties go to the floor.
pub fn rtlm_select(
    w: &Tensor,
    delta_log2: f64,
    v_w: &Tensor,
    cfg: &QuantConfig,
) -> Result<Po2Scale> {
    w.ensure_same_shape(v_w)?;
    if !delta_log2.is_finite() {
        return Err(QuantError::Domain(delta_log2));
    }
    let lo = delta_log2.floor();
    let hi = delta_log2.ceil();
    let floor = Po2Scale::from_integral(lo)?;
    if lo == hi {
        return Ok(floor);
    }
    let ceil = Po2Scale::from_integral(hi)?;
    let mask = rtlm_mask(w, delta_log2, cfg);
    let weight: Vec<f64> = mask
        .data()
        .iter()
        .zip(v_w.data())
        .map(|(m, v)| m * v)
        .collect();
    let e_ceil = rtlm_error(w, ceil, &weight, cfg)?;
    let e_floor = rtlm_error(w, floor, &weight, cfg)?;
    Ok(if e_ceil < e_floor { ceil } else { floor })
}

/// The power-of-two step a quantizer with this state applies to `w`.
///
/// `gva` supplies RTLM's element weights; without it (or before it has seen
/// a gradient) every element weighs 1.
pub fn effective_scale(
    state: &GradScaleState,
    w: &Tensor,
    gva: Option<&GvaState>,
    cfg: &QuantConfig,
) -> Result<Po2Scale> {
    if state.frozen {
        return state.ema_scale();
    }
    match state.rounding_mode {
        RoundingMode::Ceil => Po2Scale::from_integral(state.delta_log2.ceil()),
        RoundingMode::Round => Po2Scale::from_integral(round_half_away(state.delta_log2)),
        RoundingMode::Rtlm => {
            let v_w = match gva {
                Some(g) => gva_msqe_weights(g, None)?,
                None => w.map(|_| 1.0),
            };
            rtlm_select(w, state.delta_log2, &v_w, cfg)
        }
    }
}

pub fn forward(w: &Tensor, state: &GradScaleState, cfg: &QuantConfig) -> Result<(Tensor, Po2Scale)> {
    forward_with(w, state, None, cfg)
}

pub fn forward_with(
    w: &Tensor,
    state: &GradScaleState,
    gva: Option<&GvaState>,
    cfg: &QuantConfig,
) -> Result<(Tensor, Po2Scale)> {
    let scale = effective_scale(state, w, gva, cfg)?;
    Ok((quantize(w, scale, cfg)?, scale))
}

/// Straight-through derivative of `Q(w, step)` with respect to `step`,
/// evaluated at `x = w / step`:
///
/// * `round(x) - x` when `round(x)` lies in `[q_min, q_max]`,
/// * `q_max` above the range, `q_min` below it.
#[inline]
pub fn ste_scale_gradient(x: f64, cfg: &QuantConfig) -> f64 {
    let r = round_half_away(x);
    if r > cfg.q_max() as f64 {
        cfg.q_max() as f64
    } else if r < cfg.q_min() as f64 {
        cfg.q_min() as f64
    } else {
        r - x
    }
}

/// `d step / d delta_log2 = ln 2 * 2^delta_log2`.
#[inline]
pub fn log2_chain_factor(delta_log2: f64) -> f64 {
    LN_2 * delta_log2.exp2()
}

/// Backward pass for a quantizer that used `scale` in its forward pass.
///
/// Returns the input gradient (upstream passed through where the code was
/// not clipped, zero elsewhere) and the scalar gradient of `delta_log2`.
pub fn backward_with_scale(
    w: &Tensor,
    scale: Po2Scale,
    state: &GradScaleState,
    upstream: &Tensor,
    cfg: &QuantConfig,
) -> Result<(Tensor, f64)> {
    w.ensure_same_shape(upstream)?;
    let step = scale.value();
    let mut grad_w = upstream.clone();
    let mut acc = 0.0;
    for ((gw, &x), &up) in grad_w.data_mut().iter_mut().zip(w.data()).zip(upstream.data()) {
        let xs = x / step;
        if !cfg.contains(round_half_away(xs)) {
            *gw = 0.0;
        }
        acc += up * ste_scale_gradient(xs, cfg);
    }
    let grad_delta = if state.frozen {
        0.0
    } else {
        log2_chain_factor(state.delta_log2) * acc
    };
    Ok((grad_w, grad_delta))
}

/// Backward pass recomputing the forward scale (without second-moment
/// weights).
pub fn backward(
    w: &Tensor,
    state: &GradScaleState,
    upstream: &Tensor,
    cfg: &QuantConfig,
) -> Result<(Tensor, f64)> {
    let scale = effective_scale(state, w, None, cfg)?;
    backward_with_scale(w, scale, state, upstream, cfg)
}

/// Tracks the running exponent average and substitutes the averaged scale
/// once frozen. While frozen the average is held fixed.
pub fn freeze_step(
    state: &GradScaleState,
    observed: Po2Scale,
) -> Result<(GradScaleState, Po2Scale)> {
    let mut next = *state;
    if next.frozen {
        let scale = next.ema_scale()?;
        next.last_po2 = scale;
        return Ok((next, scale));
    }
    let beta = next.ema_decay;
    next.ema_log2 = beta * next.ema_log2 + (1.0 - beta) * observed.exponent() as f64;
    next.last_po2 = observed;
    Ok((next, observed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s4() -> QuantConfig {
        QuantConfig::signed(4).unwrap()
    }

    fn state(d: f64, mode: RoundingMode) -> GradScaleState {
        GradScaleState::new(d, mode).unwrap()
    }

    #[test]
    fn effective_scale_modes() {
        let w = Tensor::from_vec(vec![1.0]);
        let cfg = s4();
        let e = |st: &GradScaleState| effective_scale(st, &w, None, &cfg).unwrap().exponent();
        assert_eq!(e(&state(-0.3, RoundingMode::Ceil)), 0);
        assert_eq!(e(&state(-0.3, RoundingMode::Round)), 0);
        assert_eq!(e(&state(0.3, RoundingMode::Ceil)), 1);
        let mut frozen = state(3.0, RoundingMode::Ceil);
        frozen.ema_log2 = -1.2;
        frozen.freeze().unwrap();
        assert_eq!(e(&frozen), -1);
        assert_eq!(frozen.last_po2.value(), 0.5);
    }

    #[test]
    fn forward_examples() {
        let cfg = s4();
        let st = state(0.0, RoundingMode::Round);
        let w = Tensor::from_vec(vec![-1.0, -0.6, -0.2, 0.4, 0.5, 1.0]);
        let (q, s) = forward(&w, &st, &cfg).unwrap();
        assert_eq!(s.exponent(), 0);
        assert_eq!(q.data(), &[-1.0, -1.0, 0.0, 0.0, 1.0, 1.0]);
        let (q, _) = forward(&Tensor::from_vec(vec![10.0]), &st, &cfg).unwrap();
        assert_eq!(q.data(), &[7.0]);
    }

    #[test]
    fn backward_examples() {
        let cfg = s4();
        let st = state(0.0, RoundingMode::Round);
        let up = Tensor::from_vec(vec![1.0]);
        let (gw, gd) = backward(&Tensor::from_vec(vec![10.0]), &st, &up, &cfg).unwrap();
        assert_eq!(gw.data(), &[0.0]);
        assert!((gd - 7.0 * LN_2).abs() < 1e-15);

        let (gw, gd) = backward(&Tensor::from_vec(vec![0.3]), &st, &up, &cfg).unwrap();
        assert_eq!(gw.data(), &[1.0]);
        assert!((gd - (-0.3 * LN_2)).abs() < 1e-15);

        let lattice = Tensor::from_vec(vec![-7.0, -2.0, 0.0, 3.0, 7.0]);
        let ups = Tensor::from_vec(vec![0.5, -1.0, 2.0, 3.0, 1.0]);
        let (gw, gd) = backward(&lattice, &st, &ups, &cfg).unwrap();
        assert_eq!(gd, 0.0);
        assert_eq!(gw, ups);
    }

    #[test]
    fn frozen_backward_has_no_scale_gradient() {
        let cfg = s4();
        let mut st = state(0.0, RoundingMode::Round);
        st.freeze().unwrap();
        let (_, gd) = backward(
            &Tensor::from_vec(vec![10.0]),
            &st,
            &Tensor::from_vec(vec![1.0]),
            &cfg,
        )
        .unwrap();
        assert_eq!(gd, 0.0);
    }

    #[test]
    fn rtlm_integral_exponent_is_returned() {
        let w = Tensor::from_vec(vec![0.3, -2.0, 5.0]);
        let v = Tensor::ones(&[3]).unwrap();
        for e in [-2.0, 0.0, 3.0] {
            assert_eq!(rtlm_select(&w, e, &v, &s4()).unwrap().exponent(), e as i32);
        }
    }

    #[test]
    fn rtlm_single_weighted_element_decides() {
        // Only the first element carries weight; at delta_log2 = 0.5 the mask
        // threshold is 7 * sqrt(2), so it is inside.
        let cfg = s4();
        let v = Tensor::from_vec(vec![1.0, 0.0, 0.0]);
        // 1.2: step 1 leaves 0.2, step 2 leaves 0.8 -> floor.
        let w = Tensor::from_vec(vec![1.2, 3.1, -6.0]);
        assert_eq!(rtlm_select(&w, 0.5, &v, &cfg).unwrap().exponent(), 0);
        // 2.0: both exact -> tie -> floor.
        let w = Tensor::from_vec(vec![2.0, 3.1, -6.0]);
        assert_eq!(rtlm_select(&w, 0.5, &v, &cfg).unwrap().exponent(), 0);
        // 7.9: step 1 clips to 7 (0.9), step 2 gives 8 (0.1) -> ceil.
        let w = Tensor::from_vec(vec![7.9, 3.1, -6.0]);
        assert_eq!(rtlm_select(&w, 0.5, &v, &cfg).unwrap().exponent(), 1);
    }

    #[test]
    fn freeze_step_examples() {
        let mut st = state(0.0, RoundingMode::Round);
        st.ema_log2 = 0.0;
        let obs = Po2Scale::new(-1).unwrap();
        let (next, out) = freeze_step(&st, obs).unwrap();
        assert!((next.ema_log2 - (-0.01)).abs() < 1e-15);
        assert_eq!(out, obs);

        let mut frozen = st;
        frozen.ema_log2 = -0.7;
        frozen.freeze().unwrap();
        let mut s = frozen;
        for k in 0..100 {
            let (n, out) = freeze_step(&s, Po2Scale::new(k % 3).unwrap()).unwrap();
            assert_eq!(out.exponent(), -1);
            assert_eq!(n.ema_log2, -0.7);
            s = n;
        }
    }

    #[test]
    fn duty_cycle_freezes_to_majority() {
        let mut st = state(0.0, RoundingMode::Round);
        st.ema_log2 = 0.0;
        for t in 0..10_000 {
            let e = if t % 10 < 7 { -1 } else { 0 };
            st = freeze_step(&st, Po2Scale::new(e).unwrap()).unwrap().0;
        }
        assert!((st.ema_log2 + 0.7).abs() < 0.05, "ema {}", st.ema_log2);
        st.freeze().unwrap();
        assert_eq!(st.last_po2.exponent(), -1);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("RTLM".parse::<RoundingMode>().unwrap(), RoundingMode::Rtlm);
        assert!("floor".parse::<RoundingMode>().is_err());
        assert_eq!(RoundingMode::Ceil.to_string(), "ceil");
    }
}
