//! Adam with bias correction, plus a cosine learning-rate decay.

use std::f64::consts::PI;

use crate::error::{QuantError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Result<Self> {
        Ok(Self {
            m: Tensor::zeros(shape)?,
            v: Tensor::zeros(shape)?,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            step: 0,
        })
    }

    /// State for a single scalar parameter.
    pub fn scalar() -> Self {
        Self::new(&[1]).expect("non-empty shape")
    }

    pub fn m(&self) -> &Tensor {
        &self.m
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(QuantError::ShapeMismatch {
                expected: self.m.shape().to_vec(),
                found: vec![params.len().max(grads.len())],
            });
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(QuantError::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(QuantError::NonFinite { index, value });
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.data_mut())
            .zip(self.v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    /// Scalar convenience wrapper around [`AdamState::update`].
    pub fn update_scalar(&mut self, param: &mut f64, grad: f64, lr: f64) -> Result<()> {
        let mut p = [*param];
        self.update(&mut p, &[grad], lr)?;
        *param = p[0];
        Ok(())
    }
}

pub fn adam_step(
    param: &Tensor,
    grad: &Tensor,
    state: &AdamState,
    lr: f64,
) -> Result<(Tensor, AdamState)> {
    param.ensure_same_shape(grad)?;
    let mut next_state = state.clone();
    let mut next = param.clone();
    next_state.update(next.data_mut(), grad.data(), lr)?;
    Ok((next, next_state))
}

/// Cosine decay from `initial_lr` to `alpha * initial_lr` over
/// `decay_steps`, held constant afterwards (no restarts).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDecay {
    pub initial_lr: f64,
    pub decay_steps: u64,
    pub alpha: f64,
}

impl CosineDecay {
    pub fn new(initial_lr: f64, decay_steps: u64, alpha: f64) -> Self {
        Self {
            initial_lr,
            decay_steps,
            alpha,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.decay_steps == 0 {
            return self.initial_lr;
        }
        let t = step.min(self.decay_steps) as f64 / self.decay_steps as f64;
        let cosine = 0.5 * (1.0 + (PI * t).cos());
        self.initial_lr * ((1.0 - self.alpha) * cosine + self.alpha)
    }
}
