//! Adaptive activation rounding for post-training quantization.
//!
//! Activations are rounded with a learnable border `B(x)` instead of the
//! fixed 0.5 of rounding to nearest: `x_q = s * clip(ceil(x/s - B(x)))`.
//! The crate provides the quantizer and border functions, error analysis
//! with brute-force oracles, a toy model format with a reference forward
//! pass, and a calibration engine that jointly learns weight rounding,
//! step sizes and border coefficients.

pub mod analysis;
pub mod calibration;
pub mod error;
mod kernel;
pub mod model;
pub mod quantizer;
pub mod report;
pub mod tensor;

pub use calibration::{calibrate, CalibConfig, CalibMode, CalibState, Schedule};
pub use error::{Error, Result};
pub use model::{forward_fp, forward_quant, Model};
pub use quantizer::{BorderFunction, BorderVariant, QuantParams};
pub use report::{EvaluationReport, LayerErrorReport};
pub use tensor::{ConvGeometry, Tensor};
