use crate::error::{Error, Result};
use crate::kernel::{ActQuant, Rounding};
use crate::quantizer::{effective_border, quantize_with_border};
use crate::tensor::{col2img_add, gemm, img2col_into, Tensor};

use super::{Geometry, Layer, LinearLayer, Model};

/// Output of [`forward_quant`]: every activation of the quantized model,
/// indexed like the full-precision activations.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantForward {
    pub activations: Vec<Tensor>,
}

impl QuantForward {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("input activation present")
    }
}

/// Lowers a batched layer input `[batch, ...]` to the `[hidden, batch*positions]`
/// column matrix. Column `n*positions + p` is position `p` of sample `n`.
pub(crate) fn lower(geom: &Geometry, x: &[f64], batch: usize) -> Vec<f64> {
    let hidden = geom.hidden_dim();
    let p = geom.positions();
    let ld = batch * p;
    let len = geom.input_len();
    let mut cols = vec![0.0; hidden * ld];
    match geom {
        Geometry::Conv(g) => {
            for n in 0..batch {
                img2col_into(&x[n * len..(n + 1) * len], g, &mut cols, ld, n * p);
            }
        }
        Geometry::Fc { .. } => {
            for n in 0..batch {
                for j in 0..hidden {
                    cols[j * ld + n] = x[n * len + j];
                }
            }
        }
    }
    cols
}

/// Accumulates the adjoint of [`lower`] into `d_x`.
pub(crate) fn lower_adjoint(geom: &Geometry, d_cols: &[f64], batch: usize, d_x: &mut [f64]) {
    let hidden = geom.hidden_dim();
    let p = geom.positions();
    let ld = batch * p;
    let len = geom.input_len();
    match geom {
        Geometry::Conv(g) => {
            for n in 0..batch {
                col2img_add(d_cols, g, ld, n * p, &mut d_x[n * len..(n + 1) * len]);
            }
        }
        Geometry::Fc { .. } => {
            for n in 0..batch {
                for j in 0..hidden {
                    d_x[n * len + j] += d_cols[j * ld + n];
                }
            }
        }
    }
}

/// Turns the `[o_c, batch*positions]` product into `[batch, o_c, positions]`
/// and adds the bias.
pub(crate) fn raise(geom: &Geometry, y: &[f64], batch: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let o_c = geom.out_channels();
    let p = geom.positions();
    let ld = batch * p;
    let mut out = vec![0.0; o_c * ld];
    for n in 0..batch {
        for o in 0..o_c {
            let b = bias.map_or(0.0, |b| b[o]);
            let src = &y[o * ld + n * p..o * ld + (n + 1) * p];
            let dst = &mut out[(n * o_c + o) * p..(n * o_c + o + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

pub(crate) fn raise_adjoint(geom: &Geometry, d_out: &[f64], batch: usize) -> Vec<f64> {
    let o_c = geom.out_channels();
    let p = geom.positions();
    let ld = batch * p;
    let mut d_y = vec![0.0; o_c * ld];
    for n in 0..batch {
        for o in 0..o_c {
            let src = &d_out[(n * o_c + o) * p..(n * o_c + o + 1) * p];
            d_y[o * ld + n * p..o * ld + (n + 1) * p].copy_from_slice(src);
        }
    }
    d_y
}

fn check_batch(model: &Model, input: &Tensor) -> Result<usize> {
    let shape = input.shape();
    if shape.len() != model.input_shape.len() + 1 || shape[1..] != model.input_shape[..] {
        return Err(Error::InvalidShape(format!(
            "expected a batch of {:?} inputs, got {:?}",
            model.input_shape,
            shape
        )));
    }
    if shape[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(shape[0])
}

fn linear_fp(layer: &LinearLayer, x: &[f64], batch: usize) -> Result<Vec<f64>> {
    let g = &layer.geometry;
    let cols = lower(g, x, batch);
    let w = layer.weight_matrix()?;
    let (o_c, hidden, n) = (g.out_channels(), g.hidden_dim(), batch * g.positions());
    let mut y = vec![0.0; o_c * n];
    gemm(w.data(), &cols, &mut y, o_c, hidden, n);
    Ok(raise(g, &y, batch, layer.bias.as_deref()))
}

fn linear_quant(layer: &LinearLayer, index: usize, x: &[f64], batch: usize) -> Result<Vec<f64>> {
    let q = layer.quant.as_ref().ok_or(Error::MissingQuantParams(index))?;
    let g = &layer.geometry;
    let (o_c, hidden, n) = (g.out_channels(), g.hidden_dim(), batch * g.positions());
    let cols = lower(g, x, batch);
    let w = q.weight_matrix(o_c)?;
    let mut y = vec![0.0; o_c * n];
    if q.border.is_per_row() {
        let params = &q.activation;
        let mut column = vec![0.0; hidden];
        for c in 0..n {
            for (j, v) in column.iter_mut().enumerate() {
                *v = cols[j * n + c] / params.step;
            }
            for o in 0..o_c {
                let borders = q.border.evaluate_row(o, &column)?;
                let mut acc = 0.0;
                for j in 0..hidden {
                    let xq =
                        quantize_with_border(cols[j * n + c], params, effective_border(borders[j]))?;
                    acc += w.data()[o * hidden + j] * xq;
                }
                y[o * n + c] = acc;
            }
        }
    } else {
        let mut qcols = vec![0.0; cols.len()];
        ActQuant {
            params: &q.activation,
            border: &q.border,
            rounding: Rounding::Hard,
            alpha: 1.0,
            skip: None,
        }
        .forward(&cols, hidden, n, &mut qcols, None);
        gemm(w.data(), &qcols, &mut y, o_c, hidden, n);
    }
    let bias = q.bias_q.as_deref().or(layer.bias.as_deref());
    Ok(raise(g, &y, batch, bias))
}

/// Applies non-linear layers, or a linear layer in full precision.
pub(crate) fn apply_fp_layer(
    layer: &Layer,
    acts: &[Vec<f64>],
    offset: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    let x = acts.last().expect("layer input present");
    Ok(match layer {
        Layer::Linear(l) => linear_fp(l, x, batch)?,
        Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        Layer::ResidualAdd { from } => {
            let skip = &acts[*from - offset];
            x.iter().zip(skip).map(|(a, b)| a + b).collect()
        }
    })
}

fn run(model: &Model, input: &Tensor, quant: bool) -> Result<Vec<Tensor>> {
    let batch = check_batch(model, input)?;
    let shapes = model.activation_shapes()?;
    let mut acts = vec![input.data().to_vec()];
    for (i, spec) in model.layers.iter().enumerate() {
        let out = match (&spec.layer, quant) {
            (Layer::Linear(l), true) => linear_quant(l, i, &acts[i], batch)?,
            (layer, _) => apply_fp_layer(layer, &acts, 0, batch)?,
        };
        acts.push(out);
    }
    acts.into_iter()
        .zip(shapes)
        .map(|(data, shape)| {
            let mut full = vec![batch];
            full.extend(shape);
            Tensor::new(full, data)
        })
        .collect()
}

/// Full-precision reference forward over a batch `[N, ...input_shape]`.
/// Returns every activation, starting with the input.
pub fn forward_fp(model: &Model, input: &Tensor) -> Result<Vec<Tensor>> {
    run(model, input, false)
}

/// Quantized forward: every linear layer quantizes its incoming activation
/// with its border function and multiplies by its quantized weights. Layer
/// outputs stay unquantized.
pub fn forward_quant(model: &Model, input: &Tensor) -> Result<QuantForward> {
    Ok(QuantForward {
        activations: run(model, input, true)?,
    })
}

/// The `[hidden, N*positions]` column matrix a linear layer sees for a batch
/// of its inputs.
pub fn layer_columns(layer: &LinearLayer, input: &Tensor) -> Result<Tensor> {
    let g = &layer.geometry;
    let len = g.input_len();
    if input.is_empty() || !input.len().is_multiple_of(len) || input.shape()[0] * len != input.len() {
        return Err(Error::InvalidShape(format!(
            "input {:?} is not a batch of {len}-element layer inputs",
            input.shape()
        )));
    }
    let batch = input.shape()[0];
    let cols = lower(g, input.data(), batch);
    Tensor::new(vec![g.hidden_dim(), batch * g.positions()], cols)
}
