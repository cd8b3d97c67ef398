//! Experiment drivers and stability metrics.

pub mod metrics;
pub mod qat;
pub mod series;
pub mod toy;

pub use metrics::*;
pub use series::MetricSeries;
