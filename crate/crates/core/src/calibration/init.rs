//! Baseline quantization attached before calibration.

use crate::error::{Error, Result};
use crate::model::{forward_fp, LayerQuant, Model};
use crate::quantizer::{
    nearest_levels, quantize_with_border, BorderFunction, BorderVariant, QuantParams,
};
use crate::tensor::Tensor;

use super::CalibConfig;

/// Samples used to pick initial steps.
const INIT_SAMPLES: usize = 256;
/// Values per tensor used to pick a step.
const INIT_VALUES: usize = 1 << 16;
const STEP_CANDIDATES: usize = 120;

/// Every `len / limit`-th entry, so at most about `limit` values.
fn strided(values: &[f64], limit: usize) -> Vec<f64> {
    let stride = values.len().div_ceil(limit).max(1);
    values.iter().step_by(stride).copied().collect()
}

pub(crate) fn first_samples(samples: &Tensor, limit: usize) -> Result<Tensor> {
    let n = samples.shape()[0];
    if n <= limit {
        return Ok(samples.clone());
    }
    let per = samples.len() / n;
    let mut shape = samples.shape().to_vec();
    shape[0] = limit;
    Tensor::new(shape, samples.data()[..limit * per].to_vec())
}

/// Step minimizing the squared error of nearest rounding of `values` on a
/// `bits`-bit grid, searched over fractions of `max|v| / q_max`.
pub fn search_step(values: &[f64], bits: u32, signed: bool) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cannot pick a step for {v}")));
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok(1.0);
    }
    let unit = QuantParams::new(bits, 1.0, signed)?;
    let base = max / unit.q_max as f64;
    let mut best = (f64::INFINITY, base);
    for c in 1..=STEP_CANDIDATES {
        let p = unit.with_step(base * c as f64 / 100.0)?;
        let err: f64 = values
            .iter()
            .map(|&v| {
                let d = quantize_with_border(v, &p, 0.5).expect("finite value") - v;
                d * d
            })
            .sum();
        if err < best.0 {
            best = (err, p.step);
        }
    }
    Ok(best.1)
}

fn initial_border(config: &CalibConfig, hidden: usize, channel_size: usize) -> Result<BorderFunction> {
    match config.border {
        BorderVariant::Constant => Ok(BorderFunction::nearest(hidden)),
        BorderVariant::ElementLinear => Err(Error::InvalidArgument(
            "per-element borders are analytic and cannot be calibrated".into(),
        )),
        v => BorderFunction::learned(v, hidden, channel_size, config.fusion),
    }
}

/// Attaches rounding-to-nearest quantization to every linear layer of a
/// full-precision model: per-channel weight steps and a per-tensor
/// activation step chosen by error search, and the initial border of
/// `config.border`, which evaluates to exactly 0.5.
pub fn prepare_baseline(fp: &Model, samples: &Tensor, config: &CalibConfig) -> Result<Model> {
    config.validate()?;
    let subset = first_samples(samples, INIT_SAMPLES)?;
    let acts = forward_fp(fp, &subset)?;
    let linear = fp.linear_indices();
    let mut model = fp.clone();
    for (pos, &i) in linear.iter().enumerate() {
        let (wb, ab) = config.bits.for_layer(pos, linear.len());
        let layer = fp.linear(i)?;
        let g = &layer.geometry;
        let w = layer.weight_matrix()?;
        let hidden = g.hidden_dim();
        let steps = w
            .data()
            .chunks(hidden)
            .map(|row| search_step(row, wb, true))
            .collect::<Result<Vec<_>>>()?;
        let params = steps
            .iter()
            .map(|&s| QuantParams::new(wb, s, true))
            .collect::<Result<Vec<_>>>()?;
        let levels = nearest_levels(&w, &params)?;

        let values = strided(acts[i].data(), INIT_VALUES);
        let signed = values.iter().any(|&v| v < 0.0);
        let act_step = search_step(&values, ab, signed)?;
        let activation = QuantParams::new(ab, act_step, signed)?;

        let bias_q = match &layer.bias {
            Some(b) => {
                let p = QuantParams::new(wb, search_step(b, wb, true)?, true)?;
                Some(
                    b.iter()
                        .map(|&v| quantize_with_border(v, &p, 0.5))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            None => None,
        };
        let border = initial_border(config, hidden, g.channel_size())?;
        model.layers[i].linear_mut().expect("linear").quant = Some(LayerQuant {
            weight_bits: wb,
            weight_steps: steps.clone(),
            weight_levels: levels,
            bias_q,
            activation,
            border,
            baseline_act_step: act_step,
            baseline_weight_steps: steps,
        });
    }
    model.validate()?;
    Ok(model)
}

/// Rounding-to-nearest counterpart of a quantized model: baseline steps,
/// nearest weight levels and 0.5 borders everywhere.
pub fn nearest_baseline(model: &Model) -> Result<Model> {
    let mut out = model.clone();
    for i in model.linear_indices() {
        let layer = out.layers[i].linear_mut().expect("linear");
        let w = layer.weight_matrix()?;
        let hidden = layer.geometry.hidden_dim();
        let q = layer.quant.as_mut().ok_or(Error::MissingQuantParams(i))?;
        let params = q
            .baseline_weight_steps
            .iter()
            .map(|&s| QuantParams::new(q.weight_bits, s, true))
            .collect::<Result<Vec<_>>>()?;
        q.weight_levels = nearest_levels(&w, &params)?;
        q.weight_steps = q.baseline_weight_steps.clone();
        q.activation = q.activation.with_step(q.baseline_act_step)?;
        q.border = BorderFunction::nearest(hidden);
    }
    Ok(out)
}

/// Replaces every border by the analytic per-element border of the layer's
/// current quantized weights.
pub fn with_analytic_borders(model: &Model) -> Result<Model> {
    let mut out = model.clone();
    for i in model.linear_indices() {
        let layer = model.linear(i)?;
        let w = layer.weight_matrix()?;
        let w_hat = layer.quantized_weight_matrix(i)?;
        let border = BorderFunction::analytic(&w, &w_hat)?;
        out.layers[i]
            .linear_mut()
            .expect("linear")
            .quant
            .as_mut()
            .expect("checked above")
            .border = border;
    }
    out.validate()?;
    Ok(out)
}
