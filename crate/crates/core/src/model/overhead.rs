//! Exact parameter, model-size and compute overhead of border functions.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::quantizer::{BorderVariant, DEFAULT_BORDER_BITS};

use super::{LinearLayer, Model};

/// Weight bitwidth assumed for layers without quantization parameters.
pub const DEFAULT_WEIGHT_BITS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverheadOptions {
    pub bits_border: u32,
    /// Overrides every layer's weight bitwidth.
    pub bits_weight: Option<u32>,
    /// Assumes this border on every linear layer instead of the attached one.
    pub variant: Option<BorderVariant>,
    /// Fusion setting used together with `variant`.
    pub fusion: bool,
}

impl Default for OverheadOptions {
    fn default() -> Self {
        Self {
            bits_border: DEFAULT_BORDER_BITS,
            bits_weight: None,
            variant: None,
            fusion: false,
        }
    }
}

/// A non-negative rational with its decimal value for convenience.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactRatio {
    pub numer: u64,
    pub denom: u64,
    pub value: f64,
}

impl From<Ratio<u64>> for ExactRatio {
    fn from(r: Ratio<u64>) -> Self {
        Self {
            numer: *r.numer(),
            denom: *r.denom(),
            value: *r.numer() as f64 / *r.denom() as f64,
        }
    }
}

impl ExactRatio {
    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.numer, self.denom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverhead {
    pub layer_id: usize,
    pub name: String,
    pub variant: BorderVariant,
    pub out_channels: usize,
    pub hidden: usize,
    pub border_params: u64,
    pub weight_params: u64,
    pub bits_weight: u32,
    pub param_ratio: ExactRatio,
    pub size_ratio: ExactRatio,
    pub ops_ratio: ExactRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub bits_border: u32,
    pub layers: Vec<LayerOverhead>,
    /// Whole-model ratios; zero for a model without linear layers.
    pub param_ratio: ExactRatio,
    pub size_ratio: ExactRatio,
    pub ops_ratio: ExactRatio,
}

struct Counts {
    variant: BorderVariant,
    params: u64,
    extra_ops: u64,
}

fn border_counts(layer: &LinearLayer, opts: &OverheadOptions) -> Counts {
    let g = &layer.geometry;
    let hidden = g.hidden_dim() as u64;
    let o_c = g.out_channels() as u64;
    let channel = g.channel_size() as u64;
    let (variant, bounded, fusion) = match (opts.variant, &layer.quant) {
        (Some(v), _) => (v, v.is_learned(), opts.fusion && channel > 1),
        (None, Some(q)) => (
            q.border.variant,
            q.border.bounded,
            q.border.fusion && q.border.channel_size > 1,
        ),
        (None, None) => (BorderVariant::Constant, false, false),
    };
    let order = variant.order() as u64;
    match variant {
        BorderVariant::Constant => Counts {
            variant,
            params: 0,
            extra_ops: 0,
        },
        // one border per weight element: b1*x + b0, then the subtraction
        BorderVariant::ElementLinear => Counts {
            variant,
            params: 2 * o_c * hidden,
            extra_ops: 3 * o_c * hidden,
        },
        BorderVariant::CoarseLinear | BorderVariant::CoarseQuadratic => {
            let per_entry = 2 * order + 1 + 2 * u64::from(bounded) + u64::from(fusion);
            let fused_groups = if fusion { hidden / channel } else { 0 };
            Counts {
                variant,
                params: (order + 1) * hidden,
                extra_ops: hidden * per_entry + fused_groups,
            }
        }
    }
}

/// Per-layer and whole-model overhead in exact rational arithmetic.
///
/// Parameter ratio is border coefficients over weights; the size ratio scales
/// it by `bits_border / bits_weight`; the ops ratio divides border evaluation
/// per output position by the `2 * o_c * hidden` multiply-accumulate ops of
/// that position.
pub fn overhead_report(model: &Model, opts: &OverheadOptions) -> OverheadReport {
    let layers = model.linear_indices().into_iter().map(|i| {
        (
            i,
            model.layers[i].name.as_str(),
            model.linear(i).expect("linear index"),
        )
    });
    layer_overhead(layers, opts)
}

/// [`overhead_report`] for standalone `(layer_id, name, layer)` entries.
pub fn layer_overhead<'a>(
    entries: impl IntoIterator<Item = (usize, &'a str, &'a LinearLayer)>,
    opts: &OverheadOptions,
) -> OverheadReport {
    let mut layers = Vec::new();
    let (mut params, mut weights) = (0u64, 0u64);
    let (mut size_num, mut size_den) = (0u64, 0u64);
    let (mut ops, mut macs) = (0u64, 0u64);
    for (i, name, layer) in entries {
        let g = &layer.geometry;
        let hidden = g.hidden_dim() as u64;
        let o_c = g.out_channels() as u64;
        let w = o_c * hidden;
        let bits_weight = opts
            .bits_weight
            .or(layer.quant.as_ref().map(|q| q.weight_bits))
            .unwrap_or(DEFAULT_WEIGHT_BITS);
        let c = border_counts(layer, opts);
        let bb = u64::from(opts.bits_border);
        let bw = u64::from(bits_weight);
        layers.push(LayerOverhead {
            layer_id: i,
            name: name.to_string(),
            variant: c.variant,
            out_channels: o_c as usize,
            hidden: hidden as usize,
            border_params: c.params,
            weight_params: w,
            bits_weight,
            param_ratio: Ratio::new(c.params, w).into(),
            size_ratio: Ratio::new(c.params * bb, w * bw).into(),
            ops_ratio: Ratio::new(c.extra_ops, 2 * w).into(),
        });
        params += c.params;
        weights += w;
        size_num += c.params * bb;
        size_den += w * bw;
        ops += c.extra_ops;
        macs += 2 * w;
    }
    let ratio = |n: u64, d: u64| -> ExactRatio {
        if d == 0 {
            Ratio::from_integer(0).into()
        } else {
            Ratio::new(n, d).into()
        }
    };
    OverheadReport {
        bits_border: opts.bits_border,
        layers,
        param_ratio: ratio(params, weights),
        size_ratio: ratio(size_num, size_den),
        ops_ratio: ratio(ops, macs),
    }
}
