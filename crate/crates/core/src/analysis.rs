//! Element-wise error analysis and brute-force verification oracles.
//!
//! For one product term `w * x` with quantized weight `w + dw` and quantized
//! activation `x + dx`, the error is
//!
//! ```text
//! (w + dw)(x + dx) - w x = (w + dw) dx + dw x
//! ```
//!
//! and a dot product's error is the sum of these terms. The routines here
//! compute those errors exactly, estimate their expectation over the rounding
//! error, check that the analytic border always picks the rounding direction
//! with the smaller squared error, and enumerate every up/down assignment of a
//! short activation vector to find the best achievable dot-product error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{
    analytic_border, effective_border, quantize_with_border, BorderFunction, QuantParams,
    DEGENERATE_EPS,
};
use crate::tensor::Tensor;

/// Longest vector the brute-force oracle will enumerate.
pub const MAX_ORACLE_LEN: usize = 20;

/// Monte-Carlo estimates need at least this many samples.
pub const MIN_MC_SAMPLES: usize = 100;

/// Grid points closer than this to the border are skipped by the optimality
/// check; the two directions tie there.
pub const BORDER_TIE_EPS: f64 = 1e-9;

/// `(w + dw) * dx + dw * x`.
pub fn elementwise_error(w: f64, dw: f64, x: f64, dx: f64) -> f64 {
    (w + dw) * dx + dw * x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub w: f64,
    pub dw: f64,
    pub x: f64,
    pub dx: f64,
    pub ew_error: f64,
}

impl ErrorRecord {
    pub fn new(w: f64, dw: f64, x: f64, dx: f64) -> Self {
        Self {
            w,
            dw,
            x,
            dx,
            ew_error: elementwise_error(w, dw, x, dx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DotProductError {
    /// `w_hat . x_hat - w . x`
    pub total: f64,
    pub records: Vec<ErrorRecord>,
}

impl DotProductError {
    /// Sum of the per-element errors in index order.
    pub fn decomposed_total(&self) -> f64 {
        self.records.iter().map(|r| r.ew_error).sum()
    }
}

pub fn dot_product_error(
    w_hat: &[f64],
    x_hat: &[f64],
    w: &[f64],
    x: &[f64],
) -> Result<DotProductError> {
    let n = w.len();
    for len in [w_hat.len(), x_hat.len(), x.len()] {
        if len != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let quantized: f64 = w_hat.iter().zip(x_hat).map(|(a, b)| a * b).sum();
    let full: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    let records = (0..n)
        .map(|i| ErrorRecord::new(w[i], w_hat[i] - w[i], x[i], x_hat[i] - x[i]))
        .collect();
    Ok(DotProductError {
        total: quantized - full,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    /// Standard error of the mean.
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MonteCarloEstimate {
    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

/// Expected element-wise error at activation `x` when the rounding error is
/// spread uniformly over `[-B, 1 - B]`, with `B = border(x)`.
///
/// The position of `x` inside its grid cell is sampled uniformly and rounded
/// with the border frozen at `border(x)`; the `dw * x` term uses `x` itself.
/// Inputs are in step units.
pub fn expected_ew_error(
    w: f64,
    dw: f64,
    border: impl Fn(f64) -> f64,
    x: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_MC_SAMPLES} Monte-Carlo samples, got {n_samples}"
        )));
    }
    let b = border(x);
    if !b.is_finite() {
        return Err(Error::NonFinite(format!("border({x}) = {b}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let frac: f64 = rng.gen();
        let dx = (frac - b).ceil() - frac;
        let e = elementwise_error(w, dw, x, dx);
        sum += e;
        sum_sq += e * e;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(MonteCarloEstimate {
        mean,
        std_error: (var / n).sqrt(),
        n_samples,
        seed,
    })
}

/// Closed form of [`expected_ew_error`] for a border value `b`:
/// `(w + dw)(1 - 2b)/2 + dw * x`.
pub fn expected_ew_error_exact(w: f64, dw: f64, b: f64, x: f64) -> f64 {
    (w + dw) * (1.0 - 2.0 * b) / 2.0 + dw * x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BorderViolation {
    pub x: f64,
    pub frac: f64,
    pub border: f64,
    pub err_down: f64,
    pub err_up: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub checked: usize,
    pub skipped: usize,
    pub violations: Vec<BorderViolation>,
}

impl OptimalityReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: OptimalityReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.violations.extend(other.violations);
    }
}

/// Checks that `border` sends every grid point to the rounding direction with
/// the strictly smaller squared element-wise error: fractional parts below the
/// border must prefer rounding down, those above must prefer rounding up.
pub fn verify_border_optimality(
    w: f64,
    dw: f64,
    x_grid: &[f64],
    border: impl Fn(f64) -> f64,
) -> OptimalityReport {
    let mut report = OptimalityReport::default();
    for &x in x_grid {
        let frac = x - x.floor();
        let b = border(x);
        if (frac - b).abs() < BORDER_TIE_EPS {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let err_down = elementwise_error(w, dw, x, -frac);
        let err_up = elementwise_error(w, dw, x, 1.0 - frac);
        let ok = if frac < b {
            err_down * err_down < err_up * err_up
        } else {
            err_up * err_up < err_down * err_down
        };
        if !ok {
            report.violations.push(BorderViolation {
                x,
                frac,
                border: b,
                err_down,
                err_up,
            });
        }
    }
    report
}

/// [`verify_border_optimality`] for the analytic border of `(w, dw)`.
pub fn verify_theorem1(w: f64, dw: f64, x_grid: &[f64]) -> Result<OptimalityReport> {
    if (w + dw).abs() <= DEGENERATE_EPS {
        return Err(Error::DegenerateWeight((w + dw).abs()));
    }
    Ok(verify_border_optimality(w, dw, x_grid, |x| {
        dw / (w + dw) * x + 0.5
    }))
}

/// `n` evenly spaced points covering `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Draws a quantized weight `w + dw` as a nonzero integer in `[-max_level,
/// max_level]` and `dw` uniform in `[-0.5, 0.5]`, returning `(w, dw)`.
pub fn random_weight_pair(rng: &mut impl Rng, max_level: i64) -> (f64, f64) {
    let mut w_hat = 0;
    while w_hat == 0 {
        w_hat = rng.gen_range(-max_level..=max_level);
    }
    let dw = rng.gen_range(-0.5..=0.5);
    (w_hat as f64 - dw, dw)
}

/// Propagated-error border
/// `(dw/(w+dw)) x' + (w/(w+dw)) e + 1/2` for a noisy input `x'` carrying
/// upstream error `e`.
pub fn propagated_border(w: f64, dw: f64, x_noisy: f64, e: f64) -> Result<f64> {
    let w_hat = w + dw;
    if w_hat.abs() <= DEGENERATE_EPS {
        return Err(Error::DegenerateWeight(w_hat.abs()));
    }
    Ok(dw / w_hat * x_noisy + w / w_hat * e + 0.5)
}

/// A quantized fully connected view of a layer: `[o_c, hidden]` weights and
/// the activation quantizer at its input.
#[derive(Debug, Clone, Copy)]
pub struct QuantizedLinear<'a> {
    pub weight: &'a Tensor,
    pub weight_q: &'a Tensor,
    pub act: QuantParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperiorRatio {
    pub ratio: f64,
    pub superior: u64,
    pub pairs: u64,
    pub positions: usize,
}

/// Fraction of (position, weight element) pairs where rounding the activation
/// with `bf` gives a strictly smaller element-wise error magnitude than
/// rounding to nearest. Each entry of `positions` is one activation vector of
/// length `hidden`, e.g. one img2col column.
pub fn superior_ratio(
    layer: &QuantizedLinear<'_>,
    positions: &[Vec<f64>],
    bf: &BorderFunction,
) -> Result<SuperiorRatio> {
    if positions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (rows, hidden) = match *layer.weight.shape() {
        [r, h] => (r, h),
        _ => {
            return Err(Error::InvalidShape(format!(
                "expected a weight matrix, got {:?}",
                layer.weight.shape()
            )))
        }
    };
    if layer.weight_q.shape() != layer.weight.shape() {
        return Err(Error::InvalidShape("weight and quantized weight differ".into()));
    }
    if bf.hidden() != hidden || (bf.is_per_row() && bf.rows != rows) {
        return Err(Error::LengthMismatch {
            expected: hidden,
            actual: bf.hidden(),
        });
    }
    let w = layer.weight.data();
    let w_hat = layer.weight_q.data();
    let act = &layer.act;
    let mut superior = 0u64;
    let mut pairs = 0u64;
    for x in positions {
        if x.len() != hidden {
            return Err(Error::LengthMismatch {
                expected: hidden,
                actual: x.len(),
            });
        }
        let nearest = x
            .iter()
            .map(|&v| quantize_with_border(v, act, 0.5))
            .collect::<Result<Vec<_>>>()?;
        let scaled: Vec<f64> = x.iter().map(|v| v / act.step).collect();
        let shared = if bf.is_per_row() {
            None
        } else {
            Some(bf.evaluate(&scaled)?)
        };
        for o in 0..rows {
            let borders = match &shared {
                Some(b) => b.clone(),
                None => bf.evaluate_row(o, &scaled)?,
            };
            for j in 0..hidden {
                let idx = o * hidden + j;
                let dw = w_hat[idx] - w[idx];
                let xq = quantize_with_border(x[j], act, effective_border(borders[j]))?;
                let e_border = elementwise_error(w[idx], dw, x[j], xq - x[j]);
                let e_nearest = elementwise_error(w[idx], dw, x[j], nearest[j] - x[j]);
                if e_border.abs() < e_nearest.abs() {
                    superior += 1;
                }
                pairs += 1;
            }
        }
    }
    Ok(SuperiorRatio {
        ratio: superior as f64 / pairs as f64,
        superior,
        pairs,
        positions: positions.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// `true` where the entry is rounded up.
    pub round_up: Vec<bool>,
    pub x_hat: Vec<f64>,
    /// Signed dot-product error of the best assignment.
    pub error: f64,
}

/// Exhaustively searches every up/down rounding of the activations (weights
/// fixed) for the smallest `|w_hat . x_hat - w . x|`. The first minimizer in
/// counting order wins, so the all-down assignment is preferred among ties.
pub fn brute_force_rounding_oracle(
    w_hat: &[f64],
    w: &[f64],
    x: &[f64],
    params: &QuantParams,
) -> Result<OracleResult> {
    let n = x.len();
    if n > MAX_ORACLE_LEN {
        return Err(Error::EnumerationTooLarge(n));
    }
    for len in [w_hat.len(), w.len()] {
        if len != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let mut down = Vec::with_capacity(n);
    let mut up = Vec::with_capacity(n);
    for &v in x {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("activation {v}")));
        }
        let floor = (v / params.step).floor();
        down.push(params.step * params.clip_level(floor));
        up.push(params.step * params.clip_level(floor + 1.0));
    }
    let full: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    let mut best_mask = 0u32;
    let mut best_err = f64::INFINITY;
    let mut best_abs = f64::INFINITY;
    for mask in 0u32..(1u32 << n) {
        let mut acc = 0.0;
        for j in 0..n {
            let xq = if mask >> j & 1 == 1 { up[j] } else { down[j] };
            acc += w_hat[j] * xq;
        }
        let err = acc - full;
        if err.abs() < best_abs {
            best_abs = err.abs();
            best_err = err;
            best_mask = mask;
        }
    }
    let round_up: Vec<bool> = (0..n).map(|j| best_mask >> j & 1 == 1).collect();
    let x_hat = (0..n)
        .map(|j| if round_up[j] { up[j] } else { down[j] })
        .collect();
    Ok(OracleResult {
        round_up,
        x_hat,
        error: best_err,
    })
}

/// Dot-product error of rounding `x` with the given per-entry borders.
pub fn policy_error(
    w_hat: &[f64],
    w: &[f64],
    x: &[f64],
    params: &QuantParams,
    borders: &[f64],
) -> Result<f64> {
    if borders.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: borders.len(),
        });
    }
    let x_hat = x
        .iter()
        .zip(borders)
        .map(|(&v, &b)| quantize_with_border(v, params, effective_border(b)))
        .collect::<Result<Vec<_>>>()?;
    Ok(dot_product_error(w_hat, &x_hat, w, x)?.total)
}

/// Border that the analytic rule assigns to entry `j` of a single output row,
/// with activations in step units.
pub fn analytic_row_borders(w_hat: &[f64], w: &[f64], x_scaled: &[f64]) -> Vec<f64> {
    w_hat
        .iter()
        .zip(w)
        .zip(x_scaled)
        .map(|((&wh, &wf), &x)| analytic_border(wf, wh - wf, x).unwrap_or(0.5))
        .collect()
}
