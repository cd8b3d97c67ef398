//! Training-stability measurements on weights, quantized weights and scale
//! trajectories.

use crate::error::{QuantError, Result};
use crate::harness::series::MetricSeries;
use crate::tensor::Tensor;

/// Population variance.
pub fn population_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = xs.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64
}

/// Variance of the quantization residual `w_q - w`.
pub fn metric_quant_error_variance(w: &Tensor, w_q: &Tensor) -> Result<f64> {
    w.ensure_same_shape(w_q)?;
    Ok(population_variance(
        w.data().iter().zip(w_q.data()).map(|(a, b)| b - a),
    ))
}

/// Variance of the step-to-step change `w_q(t) - w_q(t-1)`.
pub fn metric_fluctuation_variance(w_q_t: &Tensor, w_q_prev: &Tensor) -> Result<f64> {
    w_q_t.ensure_same_shape(w_q_prev)?;
    Ok(population_variance(
        w_q_t.data().iter().zip(w_q_prev.data()).map(|(a, b)| a - b),
    ))
}

/// Largest per-channel dynamic range divided by the smallest, where a
/// channel's range is its max |w|.
pub fn metric_dynamic_range_ratio(w: &Tensor, channel_axis: usize) -> Result<f64> {
    let shape = w.shape();
    if channel_axis >= shape.len() {
        return Err(QuantError::InvalidShape(format!(
            "channel axis {channel_axis} out of range for rank {}",
            shape.len()
        )));
    }
    let channels = shape[channel_axis];
    let inner: usize = shape[channel_axis + 1..].iter().product();
    let mut ranges = vec![0.0f64; channels];
    for (i, &x) in w.data().iter().enumerate() {
        let c = (i / inner) % channels;
        ranges[c] = ranges[c].max(x.abs());
    }
    let (lo, hi) = ranges
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    if lo <= 0.0 {
        return Err(QuantError::UndefinedRatio(
            "a channel is identically zero".into(),
        ));
    }
    Ok(hi / lo)
}

/// Mean of `v` over outliers (mask 0) divided by its mean over inliers
/// (mask 1).
pub fn metric_second_moment_ratio(v: &Tensor, mask: &Tensor) -> Result<f64> {
    v.ensure_same_shape(mask)?;
    let (mut out_sum, mut out_n, mut in_sum, mut in_n) = (0.0, 0usize, 0.0, 0usize);
    for (&x, &m) in v.data().iter().zip(mask.data()) {
        if m == 0.0 {
            out_sum += x;
            out_n += 1;
        } else {
            in_sum += x;
            in_n += 1;
        }
    }
    if out_n == 0 || in_n == 0 {
        return Err(QuantError::UndefinedRatio(format!(
            "{out_n} outliers and {in_n} inliers"
        )));
    }
    let inlier_mean = in_sum / in_n as f64;
    if inlier_mean == 0.0 {
        return Err(QuantError::UndefinedRatio("inlier mean is zero".into()));
    }
    Ok((out_sum / out_n as f64) / inlier_mean)
}

/// Number of consecutive steps at which the recorded exponent changes.
pub fn metric_scale_transitions(series: &MetricSeries) -> usize {
    series.values().windows(2).filter(|w| w[0] != w[1]).count()
}

/// Mean |exponent(t) - exponent(t-1)| per step.
pub fn metric_mean_exponent_change(series: &MetricSeries) -> f64 {
    let v = series.values();
    if v.len() < 2 {
        return 0.0;
    }
    v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (v.len() - 1) as f64
}

/// Arithmetic mean across layers.
pub fn layer_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
