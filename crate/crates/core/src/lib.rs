//! Power-of-two scale quantization: MSQE scale fitting with optional
//! gradient-weighted error, learned log2 scales with ceil/round/RTLM
//! exponent selection, and a fixed-point inference simulator.

pub mod error;
pub mod fpsim;
pub mod grad;
pub mod harness;
pub mod io;
pub mod msqe;
pub mod optim;
pub mod quant;
pub mod tensor;

pub use error::{QuantError, Result};
pub use grad::{GradScaleState, RoundingMode};
pub use msqe::{FitReport, GvaState, MsqeFitConfig, MsqeQuantizer};
pub use quant::{BnParams, Po2Scale, QuantConfig};
pub use tensor::{IntTensor, Tensor};
