//! Joint calibration of weight rounding, step sizes and border coefficients.

mod engine;
mod init;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{effective_border, quantize_with_border, BorderFunction, BorderVariant, QuantParams};
use crate::tensor::Tensor;

pub use engine::{CalibGrads, LossOptions, LossParts, SegmentProblem};
pub use init::{nearest_baseline, prepare_baseline, search_step, with_analytic_borders};
pub use train::{calibrate, calibrate_with_observer, calibration_loss, CalibOutcome, Checkpoint, LogEntry};

/// Stretch limits of the rectified sigmoid.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;

pub fn rectified_sigmoid(v: f64) -> f64 {
    (crate::quantizer::sigmoid(v) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// Derivative of [`rectified_sigmoid`]; zero where the output is clipped.
pub(crate) fn rectified_sigmoid_grad(v: f64) -> f64 {
    let s = crate::quantizer::sigmoid(v);
    let raw = s * (ZETA - GAMMA) + GAMMA;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        s * (1.0 - s) * (ZETA - GAMMA)
    }
}

/// Logit whose rectified sigmoid is `h`, for `h` in `[0, 1]`.
pub fn inverse_rectified_sigmoid(h: f64) -> f64 {
    let s = (h.clamp(0.0, 1.0) - GAMMA) / (ZETA - GAMMA);
    (s / (1.0 - s)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub total_iters: usize,
    pub warmup_frac: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda: f64,
    pub input_drop_prob: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_iters: 20_000,
            warmup_frac: 0.2,
            beta_start: 20.0,
            beta_end: 2.0,
            lambda: 0.01,
            input_drop_prob: 0.0,
        }
    }
}

/// Regularization for layers with learned borders, whose weight rounding
/// converges more slowly.
pub const BORDER_BETA_START: f64 = 16.0;
pub const BORDER_LAMBDA: f64 = 0.05;

impl Schedule {
    /// The same schedule with the stronger rounding regularization used for
    /// layers that learn a border.
    pub fn for_learned_borders(self) -> Self {
        Self {
            beta_start: BORDER_BETA_START,
            lambda: BORDER_LAMBDA,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidArgument(format!(
                "warmup_frac must be in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if !(self.beta_start >= self.beta_end && self.beta_end >= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "need beta_start >= beta_end >= 2, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad lambda {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.input_drop_prob) {
            return Err(Error::InvalidArgument(format!(
                "input_drop_prob must be in [0, 1], got {}",
                self.input_drop_prob
            )));
        }
        Ok(())
    }

    /// First iteration at which rounding is blended in and the regularizer
    /// is active.
    pub fn warmup_iters(&self) -> f64 {
        self.warmup_frac * self.total_iters as f64
    }

    pub fn regularizer_active(&self, iter: usize) -> bool {
        iter as f64 >= self.warmup_iters()
    }
}

/// `(alpha, beta)` at iteration `iter`: alpha is 0 during warmup and then
/// ramps linearly to 1 at `total_iters`; beta falls linearly from
/// `beta_start` to `beta_end` over the same span.
pub fn anneal(schedule: &Schedule, iter: usize) -> Result<(f64, f64)> {
    if iter > schedule.total_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond total {}",
            schedule.total_iters
        )));
    }
    let warm = schedule.warmup_iters();
    let it = iter as f64;
    if it < warm {
        return Ok((0.0, schedule.beta_start));
    }
    let span = schedule.total_iters as f64 - warm;
    let t = if span <= 0.0 { 1.0 } else { ((it - warm) / span).min(1.0) };
    let beta = schedule.beta_start + (schedule.beta_end - schedule.beta_start) * t;
    Ok((t, beta))
}

/// `x + alpha * (q(x) - x)` for one activation with border `border`.
pub fn blended_activation(x: f64, params: &QuantParams, border: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let q = quantize_with_border(x, params, effective_border(border))?;
    if alpha == 1.0 {
        return Ok(q);
    }
    Ok(x + alpha * (q - x))
}

/// `lambda * sum(1 - |2 h(V) - 1|^beta)`.
pub fn regularizer(v: &[f64], beta: f64, lambda: f64) -> f64 {
    lambda
        * v.iter()
            .map(|&x| 1.0 - (2.0 * rectified_sigmoid(x) - 1.0).abs().powf(beta))
            .sum::<f64>()
}

/// Gradient of [`regularizer`] with respect to one logit.
pub(crate) fn regularizer_grad(v: f64, beta: f64, lambda: f64) -> f64 {
    let t = 2.0 * rectified_sigmoid(v) - 1.0;
    if t == 0.0 {
        return 0.0;
    }
    -lambda * beta * t.abs().powf(beta - 1.0) * t.signum() * 2.0 * rectified_sigmoid_grad(v)
}

/// `s * clip(floor(W / s) + h(V), q_min, q_max)` with one step per output
/// channel (the leading axis of `w`).
pub fn soft_quantize_weight(w: &Tensor, v: &[f64], steps: &[f64], bits: u32) -> Result<Tensor> {
    if v.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: w.len(),
            actual: v.len(),
        });
    }
    let channels = w.shape().first().copied().unwrap_or(0);
    if steps.len() != channels || channels == 0 {
        return Err(Error::LengthMismatch {
            expected: channels,
            actual: steps.len(),
        });
    }
    let per = w.len() / channels;
    let data = w
        .data()
        .iter()
        .zip(v)
        .enumerate()
        .map(|(i, (&wv, &vv))| {
            let p = QuantParams::new(bits, steps[i / per], true)?;
            let level = (wv / p.step).floor() + rectified_sigmoid(vv);
            Ok(p.step * p.clip_level(level))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(w.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub v: f64,
    pub step_a: f64,
    pub border: f64,
    /// Weight steps stay at their initial values unless this is positive.
    pub step_w: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            v: 3e-3,
            step_a: 4e-5,
            border: 1e-3,
            step_w: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMode {
    Layerwise,
    Blockwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BitWidths {
    pub weight: u32,
    pub activation: u32,
    /// Bitwidth of weights and input activations of the first and last
    /// linear layers; `None` keeps them at the global widths.
    pub first_last: Option<u32>,
}

impl Default for BitWidths {
    fn default() -> Self {
        Self {
            weight: 4,
            activation: 4,
            first_last: Some(8),
        }
    }
}

impl BitWidths {
    /// `(weight, activation)` bits of the `pos`-th of `count` linear layers.
    pub fn for_layer(&self, pos: usize, count: usize) -> (u32, u32) {
        match self.first_last {
            Some(b) if pos == 0 || pos + 1 == count => (b, b),
            _ => (self.weight, self.activation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub schedule: Schedule,
    pub lr: LearningRates,
    pub mode: CalibMode,
    pub batch_size: usize,
    pub seed: u64,
    /// `Constant` calibrates weight rounding and steps only.
    pub border: BorderVariant,
    pub fusion: bool,
    pub optimizer: Optimizer,
    pub bits: BitWidths,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            lr: LearningRates::default(),
            mode: CalibMode::Blockwise,
            batch_size: 32,
            seed: 0,
            border: BorderVariant::CoarseQuadratic,
            fusion: true,
            optimizer: Optimizer::Adam,
            bits: BitWidths::default(),
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.border == BorderVariant::ElementLinear {
            return Err(Error::InvalidArgument(
                "per-element borders are analytic and cannot be calibrated".into(),
            ));
        }
        for b in [Some(self.bits.weight), Some(self.bits.activation), self.bits.first_last]
            .into_iter()
            .flatten()
        {
            if !(2..=16).contains(&b) {
                return Err(Error::InvalidParams(format!(
                    "bitwidth must be in [2, 16], got {b}"
                )));
            }
        }
        let lr = &self.lr;
        if [lr.v, lr.step_a, lr.border, lr.step_w]
            .iter()
            .any(|r| !(r.is_finite() && *r >= 0.0))
        {
            return Err(Error::InvalidArgument("learning rates must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Learnable variables of one linear layer during calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibState {
    pub layer: usize,
    /// Soft-rounding logits, one per weight element.
    pub v: Vec<f64>,
    pub step_w: Vec<f64>,
    pub weight_bits: u32,
    /// Activation quantizer; its step is the learned `step_a`.
    pub activation: QuantParams,
    pub border: BorderFunction,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub iter: usize,
    pub lr: LearningRates,
}

impl CalibState {
    pub fn step_a(&self) -> f64 {
        self.activation.step
    }

    /// Soft weights `[o_c, hidden]` for the full-precision weights `w`.
    pub fn soft_weight(&self, w: &Tensor) -> Result<Tensor> {
        soft_quantize_weight(w, &self.v, &self.step_w, self.weight_bits)
    }

    /// Integer levels after hardening `h(V)` at 0.5; exact ties round up.
    pub fn hardened_levels(&self, w: &Tensor) -> Result<Vec<i64>> {
        let per = w.len() / self.step_w.len();
        w.data()
            .iter()
            .zip(&self.v)
            .enumerate()
            .map(|(i, (&wv, &vv))| {
                let p = QuantParams::new(self.weight_bits, self.step_w[i / per], true)?;
                let up = if vv >= 0.0 { 1.0 } else { 0.0 };
                Ok(p.clip_level((wv / p.step).floor() + up) as i64)
            })
            .collect()
    }
}
