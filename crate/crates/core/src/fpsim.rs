//! Integer-only dense layer with power-of-two rescaling.
//!
//! With every scale a power of two, requantizing the accumulator to the
//! output scale is an arithmetic shift. The shift rounds half away from
//! zero (a plain truncating shift would not agree with the real-valued
//! reference), which makes [`int_forward`] bit-exact against
//! [`float_reference_forward`].

use crate::error::{QuantError, Result};
use crate::quant::{Po2Scale, QuantConfig};
use crate::tensor::IntTensor;

/// Accumulators stay below this magnitude so the real-valued reference
/// represents every partial sum exactly.
pub const EXACT_ACCUMULATOR_BOUND: i128 = 1 << 53;

/// Bias codes use a signed 8-bit range.
pub fn bias_config() -> QuantConfig {
    QuantConfig::signed(8).expect("8-bit config is valid")
}

/// `acc * 2^shift`, rounding half away from zero when `shift < 0`.
pub fn shift_round(acc: i64, shift: i32) -> Result<i64> {
    if shift >= 0 {
        if shift >= 63 {
            return if acc == 0 {
                Ok(0)
            } else {
                Err(QuantError::Overflow(format!("{acc} << {shift}")))
            };
        }
        acc.checked_mul(1i64 << shift)
            .ok_or_else(|| QuantError::Overflow(format!("{acc} << {shift}")))
    } else {
        let s = shift.unsigned_abs();
        if s >= 64 {
            return Ok(0);
        }
        let mag = (acc as i128).unsigned_abs();
        let rounded = (mag + (1u128 << (s - 1))) >> s;
        let rounded = rounded as i64;
        Ok(if acc < 0 { -rounded } else { rounded })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// `[out, in]` codes.
    weight_codes: IntTensor,
    weight_scale: Po2Scale,
    weight_cfg: QuantConfig,
    /// `[out]` codes in the signed 8-bit range.
    bias_codes: IntTensor,
    bias_scale: Po2Scale,
    input_scale: Po2Scale,
    input_cfg: QuantConfig,
    output_scale: Po2Scale,
    output_cfg: QuantConfig,
}

fn check_codes(name: &str, codes: &IntTensor, cfg: &QuantConfig) -> Result<()> {
    if let Some((i, &c)) = codes
        .data()
        .iter()
        .enumerate()
        .find(|(_, &c)| c < cfg.q_min() || c > cfg.q_max())
    {
        return Err(QuantError::InvalidConfig(format!(
            "{name} code {c} at {i} outside [{}, {}]",
            cfg.q_min(),
            cfg.q_max()
        )));
    }
    Ok(())
}

impl QuantizedLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        weight_codes: IntTensor,
        weight_scale: Po2Scale,
        weight_cfg: QuantConfig,
        bias_codes: IntTensor,
        bias_scale: Po2Scale,
        input_scale: Po2Scale,
        input_cfg: QuantConfig,
        output_scale: Po2Scale,
        output_cfg: QuantConfig,
    ) -> Result<Self> {
        let &[out, inp] = weight_codes.shape() else {
            return Err(QuantError::InvalidShape(format!(
                "weight codes must be [out, in], got {:?}",
                weight_codes.shape()
            )));
        };
        if bias_codes.shape() != [out] {
            return Err(QuantError::ShapeMismatch {
                expected: vec![out],
                found: bias_codes.shape().to_vec(),
            });
        }
        if bias_scale.exponent() != weight_scale.exponent() + input_scale.exponent() {
            return Err(QuantError::InvalidConfig(format!(
                "bias exponent {} must equal weight exponent {} + input exponent {}",
                bias_scale.exponent(),
                weight_scale.exponent(),
                input_scale.exponent()
            )));
        }
        check_codes("weight", &weight_codes, &weight_cfg)?;
        check_codes("bias", &bias_codes, &bias_config())?;

        // Worst-case accumulator over all inputs admitted by input_cfg.
        let x_max = (input_cfg.q_min().unsigned_abs()).max(input_cfg.q_max().unsigned_abs()) as i128;
        for (o, row) in weight_codes.data().chunks(inp).enumerate() {
            let dot: i128 = row.iter().map(|&w| (w as i128).abs() * x_max).sum();
            let bound = dot + (bias_codes.data()[o] as i128).abs();
            if bound >= EXACT_ACCUMULATOR_BOUND {
                return Err(QuantError::Overflow(format!(
                    "row {o} accumulator may reach {bound}, limit is 2^53"
                )));
            }
            let shift = weight_scale.exponent() + input_scale.exponent() - output_scale.exponent();
            if shift > 0 && (shift >= 63 || bound << shift >= (1i128 << 63)) {
                return Err(QuantError::Overflow(format!(
                    "row {o} accumulator {bound} shifted left by {shift} exceeds 64 bits"
                )));
            }
        }
        Ok(Self {
            weight_codes,
            weight_scale,
            weight_cfg,
            bias_codes,
            bias_scale,
            input_scale,
            input_cfg,
            output_scale,
            output_cfg,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight_codes.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight_codes.shape()[0]
    }

    pub fn weight_codes(&self) -> &IntTensor {
        &self.weight_codes
    }

    pub fn bias_codes(&self) -> &IntTensor {
        &self.bias_codes
    }

    pub fn weight_scale(&self) -> Po2Scale {
        self.weight_scale
    }

    pub fn weight_cfg(&self) -> QuantConfig {
        self.weight_cfg
    }

    pub fn bias_scale(&self) -> Po2Scale {
        self.bias_scale
    }

    pub fn input_scale(&self) -> Po2Scale {
        self.input_scale
    }

    pub fn input_cfg(&self) -> QuantConfig {
        self.input_cfg
    }

    pub fn output_scale(&self) -> Po2Scale {
        self.output_scale
    }

    pub fn output_cfg(&self) -> QuantConfig {
        self.output_cfg
    }

    /// Exponent of the requantizing shift.
    pub fn shift(&self) -> i32 {
        self.weight_scale.exponent() + self.input_scale.exponent() - self.output_scale.exponent()
    }

    fn check_input(&self, input: &IntTensor) -> Result<()> {
        if input.shape() != [self.in_features()] {
            return Err(QuantError::ShapeMismatch {
                expected: vec![self.in_features()],
                found: input.shape().to_vec(),
            });
        }
        check_codes("input", input, &self.input_cfg)
    }
}

/// Integer pipeline: `clip(shift_round(W x + b, shift))`.
pub fn int_forward(layer: &QuantizedLayer, input: &IntTensor) -> Result<IntTensor> {
    layer.check_input(input)?;
    let (q_min, q_max) = layer.output_cfg.range();
    let shift = layer.shift();
    let out = layer
        .weight_codes
        .data()
        .chunks(layer.in_features())
        .zip(layer.bias_codes.data())
        .map(|(row, &b)| {
            let acc = row
                .iter()
                .zip(input.data())
                .fold(b, |acc, (&w, &x)| acc + w * x);
            Ok(shift_round(acc, shift)?.clamp(q_min, q_max))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntTensor::from_vec(out))
}

/// The same layer evaluated on dequantized reals, requantized to the output
/// scale.
pub fn float_reference_forward(layer: &QuantizedLayer, input: &IntTensor) -> Result<IntTensor> {
    layer.check_input(input)?;
    let ws = layer.weight_scale.value();
    let xs = layer.input_scale.value();
    let bs = layer.bias_scale.value();
    let os = layer.output_scale.value();
    let x: Vec<f64> = input.data().iter().map(|&c| c as f64 * xs).collect();
    let out = layer
        .weight_codes
        .data()
        .chunks(layer.in_features())
        .zip(layer.bias_codes.data())
        .map(|(row, &b)| {
            let y = row
                .iter()
                .zip(&x)
                .fold(b as f64 * bs, |acc, (&w, &xv)| acc + w as f64 * ws * xv);
            layer.output_cfg.code(y / os) as i64
        })
        .collect();
    Ok(IntTensor::from_vec(out))
}

/// Index of the first output where the two paths disagree.
pub fn first_mismatch(layer: &QuantizedLayer, input: &IntTensor) -> Result<Option<usize>> {
    let a = int_forward(layer, input)?;
    let b = float_reference_forward(layer, input)?;
    Ok(a.data().iter().zip(b.data()).position(|(x, y)| x != y))
}
