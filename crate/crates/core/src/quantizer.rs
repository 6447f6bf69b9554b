//! Uniform quantization with an explicit rounding border.
//!
//! A value is quantized as `s * clip(ceil(x/s - B), q_min, q_max)`. With
//! `B = 0.5` this is rounding to nearest; any other border moves the point at
//! which the fractional part of `x/s` switches from rounding down to rounding
//! up. A fractional part exactly equal to `B` rounds down.
//!
//! [`BorderFunction`] produces one border per hidden-dimension position of a
//! layer (or per weight element for the analytic variant), evaluated on the
//! step-scaled activation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|w + dw|` at or below this is treated as a zero quantized weight.
pub const DEGENERATE_EPS: f64 = 1e-9;

/// Output scale applied to the sigmoid of learned borders.
pub const DEFAULT_BOUND_SCALE: f64 = 2.5;

/// Bitwidth of the fixed-point grid used when border coefficients are
/// post-quantized for deployment.
pub const DEFAULT_BORDER_BITS: u32 = 12;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Raw coefficient that makes a bounded border start at `border`.
pub fn bounded_logit(border: f64, bound_scale: f64) -> f64 {
    let p = border / bound_scale;
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub step: f64,
    pub q_min: i64,
    pub q_max: i64,
    pub signed: bool,
}

impl QuantParams {
    /// Two's-complement range when `signed`, `[0, 2^bits - 1]` otherwise.
    pub fn new(bits: u32, step: f64, signed: bool) -> Result<Self> {
        if !(2..=62).contains(&bits) {
            return Err(Error::InvalidParams(format!(
                "bitwidth must be in [2, 62], got {bits}"
            )));
        }
        let levels = 1i64 << bits;
        let (q_min, q_max) = if signed {
            (-(levels / 2), levels / 2 - 1)
        } else {
            (0, levels - 1)
        };
        let p = Self {
            bits,
            step,
            q_min,
            q_max,
            signed,
        };
        p.validate()?;
        Ok(p)
    }

    /// A signed 62-bit grid, for tests that want rounding without clipping.
    pub fn wide(step: f64) -> Result<Self> {
        Self::new(62, step, true)
    }

    pub fn with_step(&self, step: f64) -> Result<Self> {
        let p = Self { step, ..*self };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 {
            return Err(Error::InvalidParams(format!(
                "bitwidth must be >= 2, got {}",
                self.bits
            )));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::InvalidParams(format!(
                "step must be positive and finite, got {}",
                self.step
            )));
        }
        let span = self.q_max.checked_sub(self.q_min);
        if span != Some((1i64 << self.bits) - 1) {
            return Err(Error::InvalidParams(format!(
                "clip range [{}, {}] does not hold 2^{} levels",
                self.q_min, self.q_max, self.bits
            )));
        }
        Ok(())
    }

    pub fn clip_level(&self, level: f64) -> f64 {
        level.clamp(self.q_min as f64, self.q_max as f64)
    }
}

/// Integer grid level `clip(ceil(x/s - B))`, before multiplying by the step.
pub fn quantize_level(x: f64, params: &QuantParams, border: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("cannot quantize {x}")));
    }
    if border.is_nan() {
        return Err(Error::NonFinite("rounding border is NaN".into()));
    }
    Ok(params.clip_level((x / params.step - border).ceil()))
}

pub fn quantize_with_border(x: f64, params: &QuantParams, border: f64) -> Result<f64> {
    Ok(params.step * quantize_level(x, params, border)?)
}

/// Per-element border `(dw / (w + dw)) * x + 1/2` that equalizes the
/// element-wise product error of rounding up and rounding down.
///
/// All three inputs are expected in step units. The result is not clamped.
pub fn analytic_border(w: f64, dw: f64, x: f64) -> Result<f64> {
    let w_hat = w + dw;
    if w_hat.abs() <= DEGENERATE_EPS {
        return Err(Error::DegenerateWeight(w_hat.abs()));
    }
    Ok(dw / w_hat * x + 0.5)
}

/// [`analytic_border`] with the nearest-rounding fallback for degenerate weights.
pub fn analytic_border_or_nearest(w: f64, dw: f64, x: f64) -> f64 {
    analytic_border(w, dw, x).unwrap_or(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BorderVariant {
    /// Fixed border, 0.5 for rounding to nearest.
    Constant,
    /// Fixed linear border per element, typically the analytic one.
    ElementLinear,
    /// Learned `b1*x + b0`, shared by all output rows.
    CoarseLinear,
    /// Learned `b2*x^2 + b1*x + b0`, shared by all output rows.
    CoarseQuadratic,
}

impl BorderVariant {
    pub fn is_learned(self) -> bool {
        matches!(self, Self::CoarseLinear | Self::CoarseQuadratic)
    }

    /// Polynomial order in the activation.
    pub fn order(self) -> usize {
        match self {
            Self::Constant => 0,
            Self::ElementLinear | Self::CoarseLinear => 1,
            Self::CoarseQuadratic => 2,
        }
    }
}

/// The rounding-border policy of one layer.
///
/// Coefficients are stored row-major as `rows` blocks of `hidden` entries.
/// Every variant except [`BorderVariant::ElementLinear`] uses a single row
/// shared by all output channels. `b2` is empty unless the variant is
/// quadratic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BorderFunction {
    pub variant: BorderVariant,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub bound_scale: f64,
    pub bounded: bool,
    pub fusion: bool,
    pub channel_size: usize,
    pub rows: usize,
}

impl BorderFunction {
    pub fn constant(hidden: usize, value: f64) -> Self {
        Self {
            variant: BorderVariant::Constant,
            b0: vec![value; hidden],
            b1: vec![0.0; hidden],
            b2: Vec::new(),
            bound_scale: DEFAULT_BOUND_SCALE,
            bounded: false,
            fusion: false,
            channel_size: 1,
            rows: 1,
        }
    }

    /// Rounding to nearest.
    pub fn nearest(hidden: usize) -> Self {
        Self::constant(hidden, 0.5)
    }

    /// Learned border initialized so every emitted value is exactly 0.5.
    ///
    /// `channel_size` is the number of consecutive hidden entries that belong
    /// to one input channel (`k*k` for convolutions, 1 for FC layers) and is
    /// only used when `fusion` is on.
    pub fn learned(
        variant: BorderVariant,
        hidden: usize,
        channel_size: usize,
        fusion: bool,
    ) -> Result<Self> {
        if !variant.is_learned() {
            return Err(Error::InvalidArgument(format!(
                "{variant:?} is not a learned border variant"
            )));
        }
        if channel_size == 0 || !hidden.is_multiple_of(channel_size) {
            return Err(Error::InvalidArgument(format!(
                "hidden length {hidden} is not a multiple of channel size {channel_size}"
            )));
        }
        let b0 = bounded_logit(0.5, DEFAULT_BOUND_SCALE);
        Ok(Self {
            variant,
            b0: vec![b0; hidden],
            b1: vec![0.0; hidden],
            b2: if variant == BorderVariant::CoarseQuadratic {
                vec![0.0; hidden]
            } else {
                Vec::new()
            },
            bound_scale: DEFAULT_BOUND_SCALE,
            bounded: true,
            fusion,
            channel_size,
            rows: 1,
        })
    }

    /// Unbounded per-element linear border `b1*x + b0` with `rows` blocks.
    pub fn element_linear(b0: Vec<f64>, b1: Vec<f64>, rows: usize) -> Result<Self> {
        let bf = Self {
            variant: BorderVariant::ElementLinear,
            b0,
            b1,
            b2: Vec::new(),
            bound_scale: DEFAULT_BOUND_SCALE,
            bounded: false,
            fusion: false,
            channel_size: 1,
            rows,
        };
        bf.validate()?;
        Ok(bf)
    }

    /// The analytic per-element border of a layer with full-precision weight
    /// matrix `w` and quantized weight matrix `w_hat`, both `[o_c, hidden]`.
    /// Activations passed to the border are in activation-step units; the
    /// slope `dw / (w + dw)` is scale free.
    pub fn analytic(w: &Tensor, w_hat: &Tensor) -> Result<Self> {
        if w.shape() != w_hat.shape() || w.rank() != 2 {
            return Err(Error::InvalidShape(format!(
                "analytic border needs two matching matrices, got {:?} and {:?}",
                w.shape(),
                w_hat.shape()
            )));
        }
        let rows = w.shape()[0];
        let b1 = w
            .data()
            .iter()
            .zip(w_hat.data())
            .map(|(&w, &wh)| {
                let dw = wh - w;
                if wh.abs() <= DEGENERATE_EPS {
                    0.0
                } else {
                    dw / wh
                }
            })
            .collect::<Vec<_>>();
        Self::element_linear(vec![0.5; b1.len()], b1, rows)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.b0.len();
        if n == 0 || self.rows == 0 || !n.is_multiple_of(self.rows) {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients cannot be split into {} rows",
                n, self.rows
            )));
        }
        if self.b1.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: self.b1.len(),
            });
        }
        let want_b2 = if self.variant == BorderVariant::CoarseQuadratic {
            n
        } else {
            0
        };
        if self.b2.len() != want_b2 {
            return Err(Error::LengthMismatch {
                expected: want_b2,
                actual: self.b2.len(),
            });
        }
        if self.rows != 1 && self.variant != BorderVariant::ElementLinear {
            return Err(Error::InvalidArgument(
                "only element-linear borders may carry per-row coefficients".into(),
            ));
        }
        if self.channel_size == 0 || !self.hidden().is_multiple_of(self.channel_size) {
            return Err(Error::InvalidArgument(format!(
                "hidden length {} is not a multiple of channel size {}",
                self.hidden(),
                self.channel_size
            )));
        }
        if !(self.bound_scale.is_finite() && self.bound_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bound scale must be positive, got {}",
                self.bound_scale
            )));
        }
        Ok(())
    }

    /// Entries per row, i.e. the hidden dimension of the layer.
    pub fn hidden(&self) -> usize {
        self.b0.len() / self.rows
    }

    /// Number of stored coefficients.
    pub fn parameter_count(&self) -> usize {
        self.b0.len() + self.b1.len() + self.b2.len()
    }

    pub fn is_per_row(&self) -> bool {
        self.rows > 1
    }

    /// Unbounded polynomial value at one entry.
    pub(crate) fn raw_at(&self, index: usize, x: f64) -> f64 {
        let quad = if self.b2.is_empty() {
            0.0
        } else {
            self.b2[index] * x * x
        };
        quad + self.b1[index] * x + self.b0[index]
    }

    /// Borders for one row of a step-scaled activation vector.
    pub fn evaluate_row(&self, row: usize, x: &[f64]) -> Result<Vec<f64>> {
        let hidden = self.hidden();
        if x.len() != hidden {
            return Err(Error::LengthMismatch {
                expected: hidden,
                actual: x.len(),
            });
        }
        if row >= self.rows {
            return Err(Error::InvalidArgument(format!(
                "row {row} out of range for {} rows",
                self.rows
            )));
        }
        let base = row * hidden;
        let mut out: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(j, &xj)| {
                let raw = self.raw_at(base + j, xj);
                if self.bounded {
                    self.bound_scale * sigmoid(raw)
                } else {
                    raw
                }
            })
            .collect();
        if self.fusion {
            fuse_groups(&mut out, self.channel_size);
        }
        Ok(out)
    }

    /// Borders for a step-scaled activation vector shared by all output rows.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.is_per_row() {
            return Err(Error::InvalidArgument(
                "per-element border needs an explicit output row".into(),
            ));
        }
        self.evaluate_row(0, x)
    }

    /// Copy whose coefficients are snapped to a symmetric fixed-point grid of
    /// `bits` bits, one scale per coefficient array.
    pub fn post_quantized(&self, bits: u32) -> Result<Self> {
        if !(2..=53).contains(&bits) {
            return Err(Error::InvalidParams(format!(
                "border bitwidth must be in [2, 53], got {bits}"
            )));
        }
        let snap = |coeffs: &[f64]| -> Vec<f64> {
            let max = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            if max == 0.0 {
                return coeffs.to_vec();
            }
            let levels = ((1u64 << (bits - 1)) - 1) as f64;
            let step = max / levels;
            coeffs.iter().map(|c| (c / step).round() * step).collect()
        };
        Ok(Self {
            b0: snap(&self.b0),
            b1: snap(&self.b1),
            b2: snap(&self.b2),
            ..self.clone()
        })
    }
}

/// Replaces every group of `size` consecutive values by the group mean.
pub fn fuse_groups(values: &mut [f64], size: usize) {
    if size <= 1 {
        return;
    }
    for group in values.chunks_mut(size) {
        let mean = group.iter().sum::<f64>() / group.len() as f64;
        group.iter_mut().for_each(|v| *v = mean);
    }
}

/// Border actually used for rounding: values outside `[0, 1]` mean "always
/// round up" or "always round down", never a second grid step.
pub fn effective_border(border: f64) -> f64 {
    border.clamp(0.0, 1.0)
}

/// Quantizes an activation vector with one border per entry, shared by every
/// output row of the consuming layer.
pub fn quantize_activation_vector(
    x: &[f64],
    params: &QuantParams,
    bf: &BorderFunction,
) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = x.iter().map(|v| v / params.step).collect();
    let borders = bf.evaluate(&scaled)?;
    x.iter()
        .zip(borders)
        .map(|(&v, b)| quantize_with_border(v, params, effective_border(b)))
        .collect()
}

/// Same as [`quantize_activation_vector`] for one output row of a per-element
/// border.
pub fn quantize_activation_row(
    x: &[f64],
    params: &QuantParams,
    bf: &BorderFunction,
    row: usize,
) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = x.iter().map(|v| v / params.step).collect();
    let borders = bf.evaluate_row(row, &scaled)?;
    x.iter()
        .zip(borders)
        .map(|(&v, b)| quantize_with_border(v, params, effective_border(b)))
        .collect()
}

fn check_channel_params(w: &Tensor, params: &[QuantParams]) -> Result<usize> {
    let channels = w.shape()[0];
    if params.len() != 1 && params.len() != channels {
        return Err(Error::LengthMismatch {
            expected: channels,
            actual: params.len(),
        });
    }
    Ok(channels)
}

/// Nearest-rounded integer levels of a weight tensor whose leading axis is the
/// output channel. `params` holds one entry per channel, or one for all.
pub fn nearest_levels(w: &Tensor, params: &[QuantParams]) -> Result<Vec<i64>> {
    let channels = check_channel_params(w, params)?;
    let per = w.len() / channels;
    w.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = &params[if params.len() == 1 { 0 } else { i / per }];
            quantize_level(v, p, 0.5).map(|l| l as i64)
        })
        .collect()
}

pub fn quantize_weight_nearest(w: &Tensor, params: &[QuantParams]) -> Result<Tensor> {
    let levels = nearest_levels(w, params)?;
    let channels = w.shape()[0];
    let per = w.len() / channels;
    let data = levels
        .iter()
        .enumerate()
        .map(|(i, &l)| params[if params.len() == 1 { 0 } else { i / per }].step * l as f64)
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}
