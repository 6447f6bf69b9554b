//! Seeded toy convolutional nets and synthetic data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

use super::{forward_fp, Block, Geometry, Layer, LayerSpec, LinearLayer, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    /// Output channels of each convolution; 3 to 5 entries.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Adds a skip connection around the second convolution when its input
    /// and output channel counts agree.
    pub residual: bool,
    pub bias: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 6, 6],
            channels: vec![8, 8, 4],
            kernel: 3,
            residual: true,
            bias: true,
        }
    }
}

/// Builds a stack of same-padded convolutions with ReLUs between them.
/// Every convolution starts its own block; the ReLU after it and an optional
/// residual add belong to the same block.
pub fn toy_conv_net(config: &ToyConfig, seed: u64) -> Result<Model> {
    if !(3..=5).contains(&config.channels.len()) {
        return Err(Error::InvalidArgument(format!(
            "toy nets have 3 to 5 convolutions, got {}",
            config.channels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [mut c_in, h, w] = config.input_shape;
    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    let last = config.channels.len() - 1;
    for (i, &c_out) in config.channels.iter().enumerate() {
        let g = ConvGeometry::same(c_out, c_in, config.kernel, h, w)?;
        let fan_in = g.hidden_dim() as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = Tensor::from_fn(g.filter_shape().to_vec(), |_| normal.sample(&mut rng))?;
        let bias = config
            .bias
            .then(|| (0..c_out).map(|_| rng.gen_range(-0.1..0.1)).collect());
        let start = layers.len();
        layers.push(LayerSpec {
            name: format!("conv{i}"),
            layer: Layer::Linear(LinearLayer::new(Geometry::Conv(g), weight, bias)?),
        });
        if config.residual && i == 1 && c_in == c_out {
            layers.push(LayerSpec {
                name: format!("add{i}"),
                layer: Layer::ResidualAdd { from: start },
            });
        }
        if i != last {
            layers.push(LayerSpec {
                name: format!("relu{i}"),
                layer: Layer::Relu,
            });
        }
        blocks.push(Block {
            start,
            end: layers.len(),
        });
        c_in = c_out;
    }
    Model::new(config.input_shape.to_vec(), layers, blocks)
}

/// `n` samples of i.i.d. standard normal inputs, shaped `[n, ...shape]`.
pub fn synthetic_samples(shape: &[usize], n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::from_fn(full, |_| StandardNormal.sample(&mut rng))
}

/// Class labels from the full-precision model: the arg-max output channel
/// after averaging over spatial positions.
pub fn argmax_labels(model: &Model, samples: &Tensor) -> Result<Vec<usize>> {
    let out = forward_fp(model, samples)?.pop().expect("output present");
    Ok(class_predictions(&out))
}

/// Arg-max channel of each sample of a `[n, channels, ...]` output.
pub fn class_predictions(output: &Tensor) -> Vec<usize> {
    let n = output.shape()[0];
    let channels = output.shape().get(1).copied().unwrap_or(1);
    let per = output.len() / n;
    let spatial = per / channels;
    (0..n)
        .map(|s| {
            let sample = &output.data()[s * per..(s + 1) * per];
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..channels {
                let mean = sample[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64;
                if mean > best.1 {
                    best = (c, mean);
                }
            }
            best.0
        })
        .collect()
}
