use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};

/// A named per-step measurement.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    steps: Vec<u64>,
    values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            steps: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_parts(name: impl Into<String>, steps: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(QuantError::InvalidConfig(format!(
                "{} steps but {} values",
                steps.len(),
                values.len()
            )));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QuantError::InvalidConfig("steps must be strictly increasing".into()));
        }
        Ok(Self {
            name: name.into(),
            steps,
            values,
        })
    }

    /// Appends a point; `step` must exceed the last recorded step.
    pub fn push(&mut self, step: u64, value: f64) -> Result<()> {
        if let Some(&last) = self.steps.last() {
            if step <= last {
                return Err(QuantError::InvalidConfig(format!(
                    "series {}: step {step} does not follow {last}",
                    self.name
                )));
            }
        }
        self.steps.push(step);
        self.values.push(value);
        Ok(())
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.steps.iter().copied().zip(self.values.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_strictly_increase() {
        let mut s = MetricSeries::new("x");
        s.push(0, 1.0).unwrap();
        s.push(3, 2.0).unwrap();
        assert!(s.push(3, 2.0).is_err());
        assert!(MetricSeries::from_parts("y", vec![1, 1], vec![0.0, 0.0]).is_err());
        assert!(MetricSeries::from_parts("y", vec![1], vec![]).is_err());
    }
}
