//! Sequential toy models with optional skip connections.
//!
//! Activations are numbered so that index 0 is the model input and index
//! `i + 1` is the output of layer `i`. Every linear layer (convolution or
//! FC) consumes the *unquantized* activation produced upstream and, when it
//! carries a [`LayerQuant`], quantizes it on entry with its border function.

mod forward;
pub mod io;
pub mod overhead;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{BorderFunction, QuantParams};
use crate::tensor::{reshape_filter, ConvGeometry, Tensor};

pub use forward::{forward_fp, forward_quant, layer_columns, QuantForward};
pub(crate) use forward::{apply_fp_layer, lower, lower_adjoint, raise, raise_adjoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Geometry {
    Conv(ConvGeometry),
    Fc {
        in_features: usize,
        out_features: usize,
    },
}

impl Geometry {
    pub fn out_channels(&self) -> usize {
        match self {
            Geometry::Conv(g) => g.o_c,
            Geometry::Fc { out_features, .. } => *out_features,
        }
    }

    /// Length of the activation vector one output element is computed from.
    pub fn hidden_dim(&self) -> usize {
        match self {
            Geometry::Conv(g) => g.hidden_dim(),
            Geometry::Fc { in_features, .. } => *in_features,
        }
    }

    /// Number of output positions per sample (sliding blocks for conv).
    pub fn positions(&self) -> usize {
        match self {
            Geometry::Conv(g) => g.positions(),
            Geometry::Fc { .. } => 1,
        }
    }

    /// Hidden entries per input channel, the scope of border fusion.
    pub fn channel_size(&self) -> usize {
        match self {
            Geometry::Conv(g) => g.k * g.k,
            Geometry::Fc { .. } => 1,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Geometry::Conv(g) => g.i_c * g.h_i * g.w_i,
            Geometry::Fc { in_features, .. } => *in_features,
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            Geometry::Conv(g) => g.output_shape().to_vec(),
            Geometry::Fc { out_features, .. } => vec![*out_features],
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            Geometry::Conv(g) => g.filter_shape().to_vec(),
            Geometry::Fc {
                in_features,
                out_features,
            } => vec![*out_features, *in_features],
        }
    }
}

/// Quantization attached to one linear layer.
///
/// Weights are stored as integer grid levels with one step per output
/// channel; the dequantized weight is `weight_steps[o] * level`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub weight_bits: u32,
    pub weight_steps: Vec<f64>,
    pub weight_levels: Vec<i64>,
    pub bias_q: Option<Vec<f64>>,
    pub activation: QuantParams,
    pub border: BorderFunction,
    /// Steps before calibration, for rebuilding the nearest baseline.
    pub baseline_act_step: f64,
    pub baseline_weight_steps: Vec<f64>,
}

impl LayerQuant {
    pub fn weight_params(&self, channel: usize) -> Result<QuantParams> {
        QuantParams::new(self.weight_bits, self.weight_steps[channel], true)
    }

    /// Dequantized `[o_c, hidden]` weight matrix.
    pub fn weight_matrix(&self, out_channels: usize) -> Result<Tensor> {
        let n = self.weight_levels.len();
        if out_channels == 0 || !n.is_multiple_of(out_channels) || self.weight_steps.len() != out_channels {
            return Err(Error::InvalidShape(format!(
                "{n} weight levels and {} steps do not fit {out_channels} channels",
                self.weight_steps.len()
            )));
        }
        let per = n / out_channels;
        let data = self
            .weight_levels
            .iter()
            .enumerate()
            .map(|(i, &l)| self.weight_steps[i / per] * l as f64)
            .collect();
        Tensor::new(vec![out_channels, per], data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub geometry: Geometry,
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
    pub quant: Option<LayerQuant>,
}

impl LinearLayer {
    pub fn new(geometry: Geometry, weight: Tensor, bias: Option<Vec<f64>>) -> Result<Self> {
        let layer = Self {
            geometry,
            weight,
            bias,
            quant: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Full-precision weights as `[o_c, hidden]`.
    pub fn weight_matrix(&self) -> Result<Tensor> {
        match self.geometry {
            Geometry::Conv(_) => reshape_filter(&self.weight),
            Geometry::Fc { .. } => Ok(self.weight.clone()),
        }
    }

    pub fn quantized_weight_matrix(&self, index: usize) -> Result<Tensor> {
        self.quant
            .as_ref()
            .ok_or(Error::MissingQuantParams(index))?
            .weight_matrix(self.geometry.out_channels())
    }

    pub fn validate(&self) -> Result<()> {
        if let Geometry::Conv(g) = &self.geometry {
            g.validate()?;
        }
        if self.weight.shape() != self.geometry.weight_shape() {
            return Err(Error::InvalidShape(format!(
                "weight shape {:?} does not match geometry {:?}",
                self.weight.shape(),
                self.geometry.weight_shape()
            )));
        }
        let o_c = self.geometry.out_channels();
        if let Some(b) = &self.bias {
            if b.len() != o_c {
                return Err(Error::LengthMismatch {
                    expected: o_c,
                    actual: b.len(),
                });
            }
        }
        if let Some(q) = &self.quant {
            let hidden = self.geometry.hidden_dim();
            if q.weight_levels.len() != self.weight.len()
                || q.weight_steps.len() != o_c
                || q.baseline_weight_steps.len() != o_c
            {
                return Err(Error::InvalidShape(
                    "quantized weight levels or steps do not match the layer".into(),
                ));
            }
            q.border.validate()?;
            if q.border.hidden() != hidden {
                return Err(Error::LengthMismatch {
                    expected: hidden,
                    actual: q.border.hidden(),
                });
            }
            if q.border.is_per_row() && q.border.rows != o_c {
                return Err(Error::LengthMismatch {
                    expected: o_c,
                    actual: q.border.rows,
                });
            }
            q.activation.validate()?;
            if let Some(b) = &q.bias_q {
                if b.len() != o_c {
                    return Err(Error::LengthMismatch {
                        expected: o_c,
                        actual: b.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Linear(LinearLayer),
    Relu,
    /// Adds activation `from` to the layer input.
    ResidualAdd { from: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub layer: Layer,
}

impl LayerSpec {
    pub fn linear(&self) -> Option<&LinearLayer> {
        match &self.layer {
            Layer::Linear(l) => Some(l),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self) -> Option<&mut LinearLayer> {
        match &mut self.layer {
            Layer::Linear(l) => Some(l),
            _ => None,
        }
    }
}

/// Half-open range of layer indices calibrated together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub blocks: Vec<Block>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, blocks: Vec<Block>) -> Result<Self> {
        let m = Self {
            input_shape,
            layers,
            blocks,
        };
        m.validate()?;
        Ok(m)
    }

    /// Shapes of every activation, starting with the input.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, spec) in self.layers.iter().enumerate() {
            let input = &shapes[i];
            let out = match &spec.layer {
                Layer::Linear(l) => {
                    let n: usize = input.iter().product();
                    let ok = match &l.geometry {
                        Geometry::Conv(g) => input.as_slice() == g.input_shape(),
                        Geometry::Fc { in_features, .. } => n == *in_features,
                    };
                    if !ok {
                        return Err(Error::InvalidShape(format!(
                            "layer {i} ({}) expects input {:?}, got {input:?}",
                            spec.name,
                            l.geometry.weight_shape()
                        )));
                    }
                    l.geometry.output_shape()
                }
                Layer::Relu => input.clone(),
                Layer::ResidualAdd { from } => {
                    if *from > i {
                        return Err(Error::InvalidShape(format!(
                            "layer {i} adds activation {from}, which is not computed yet"
                        )));
                    }
                    if shapes[*from] != *input {
                        return Err(Error::InvalidShape(format!(
                            "residual at layer {i} adds {:?} to {input:?}",
                            shapes[*from]
                        )));
                    }
                    input.clone()
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        for spec in &self.layers {
            if let Layer::Linear(l) = &spec.layer {
                l.validate()?;
            }
        }
        self.activation_shapes()?;
        let mut last_end = 0;
        for b in &self.blocks {
            if b.start >= b.end || b.end > self.layers.len() || b.start < last_end {
                return Err(Error::InvalidArgument(format!(
                    "blocks must be ordered, non-empty and disjoint: {:?}",
                    self.blocks
                )));
            }
            last_end = b.end;
        }
        for (i, spec) in self.layers.iter().enumerate() {
            if let Layer::ResidualAdd { from } = spec.layer {
                if let Some(b) = self.blocks.iter().find(|b| b.start <= i && i < b.end) {
                    if from < b.start {
                        return Err(Error::InvalidArgument(format!(
                            "skip connection into layer {i} starts outside its block {b:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.activation_shapes()?.pop().expect("input shape present"))
    }

    /// Indices of linear layers in order.
    pub fn linear_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.layer, Layer::Linear(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn linear(&self, index: usize) -> Result<&LinearLayer> {
        self.layers
            .get(index)
            .and_then(LayerSpec::linear)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {index} is not linear")))
    }

    pub fn is_quantized(&self) -> bool {
        self.layers
            .iter()
            .filter_map(LayerSpec::linear)
            .all(|l| l.quant.is_some())
    }

    /// Calibration segments: declared blocks, plus single-layer segments for
    /// linear layers outside every block.
    pub fn segments(&self, blockwise: bool) -> Vec<Block> {
        let linear = self.linear_indices();
        if !blockwise {
            return linear
                .into_iter()
                .map(|i| Block { start: i, end: i + 1 })
                .collect();
        }
        let mut out: Vec<Block> = Vec::new();
        for i in linear {
            if out.last().is_some_and(|b| b.start <= i && i < b.end) {
                continue;
            }
            match self.blocks.iter().find(|b| b.start <= i && i < b.end) {
                Some(b) => out.push(*b),
                None => out.push(Block { start: i, end: i + 1 }),
            }
        }
        out
    }
}
