//! Dense row-major tensors of `f64` values and `i64` codes.

use crate::error::{QuantError, Result};

fn check_shape(len: usize, shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(QuantError::InvalidShape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| QuantError::InvalidShape(format!("shape {shape:?} overflows usize")))?;
    if expected != len {
        return Err(QuantError::InvalidShape(format!(
            "shape {shape:?} holds {expected} elements but data has {len}"
        )));
    }
    Ok(())
}

/// Real-valued tensor carrying weights, activations, gradients, masks and
/// second-moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
    channel_axis: Option<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        check_shape(data.len(), &shape)?;
        Ok(Self {
            data,
            shape,
            channel_axis: None,
        })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let shape = vec![data.len()];
        Self {
            data,
            shape,
            channel_axis: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(vec![value; len], shape.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 1.0)
    }

    pub fn with_channel_axis(mut self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(QuantError::InvalidShape(format!(
                "channel axis {axis} out of range for rank {}",
                self.shape.len()
            )));
        }
        self.channel_axis = Some(axis);
        Ok(self)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channel_axis(&self) -> Option<usize> {
        self.channel_axis
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(QuantError::ShapeMismatch {
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Applies `f` element-wise, keeping shape and channel axis.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&x| f(x)).collect(),
            shape: self.shape.clone(),
            channel_axis: self.channel_axis,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        Ok(Tensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            shape: self.shape.clone(),
            channel_axis: self.channel_axis,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Index of the first NaN or infinite element.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, x)| !x.is_finite())
            .map(|(i, &x)| (i, x))
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((index, value)) => Err(QuantError::NonFinite { index, value }),
            None => Ok(()),
        }
    }
}

/// Integer tensor holding quantization codes and fixed-point accumulators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    data: Vec<i64>,
    shape: Vec<usize>,
}

impl IntTensor {
    pub fn new(data: Vec<i64>, shape: Vec<usize>) -> Result<Self> {
        check_shape(data.len(), &shape)?;
        Ok(Self { data, shape })
    }

    pub fn from_vec(data: Vec<i64>) -> Self {
        let shape = vec![data.len()];
        Self { data, shape }
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i64> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&x| x as f64).collect(),
            shape: self.shape.clone(),
            channel_axis: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_cover_data() {
        assert!(Tensor::new(vec![0.0; 6], vec![2, 3]).is_ok());
        assert!(Tensor::new(vec![0.0; 5], vec![2, 3]).is_err());
        assert!(Tensor::new(vec![], vec![0]).is_err());
        assert!(IntTensor::new(vec![1, 2], vec![2, 1]).is_ok());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let t = Tensor::new(vec![3.0], vec![]).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.shape().is_empty());
    }

    #[test]
    fn channel_axis_validated() {
        let t = Tensor::zeros(&[2, 3]).unwrap();
        assert!(t.clone().with_channel_axis(1).is_ok());
        assert!(t.with_channel_axis(2).is_err());
    }

    #[test]
    fn zip_map_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[3, 2]).unwrap();
        assert!(matches!(
            a.zip_map(&b, |x, y| x + y),
            Err(QuantError::ShapeMismatch { .. })
        ));
    }
}
