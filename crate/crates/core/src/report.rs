//! Per-layer error reports comparing quantized models against full precision.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{superior_ratio, QuantizedLinear};
use crate::calibration::{nearest_baseline, with_analytic_borders};
use crate::error::{Error, Result};
use crate::model::toy::class_predictions;
use crate::model::{forward_fp, forward_quant, layer_columns, Model};
use crate::tensor::Tensor;

/// Positions per layer scored for the superior ratio by default.
pub const DEFAULT_MAX_POSITIONS: usize = 2048;

pub const CSV_HEADER: &str = "layer_id,mse_quant,mse_baseline,superior_ratio,n_positions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerErrorReport {
    pub layer_id: usize,
    pub mse_quant: f64,
    pub mse_baseline: f64,
    pub superior_ratio: f64,
    pub n_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigReport {
    pub name: String,
    pub layers: Vec<LayerErrorReport>,
    pub e2e_mse: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub config_hash: String,
    pub n_samples: usize,
    pub configs: Vec<ConfigReport>,
}

impl EvaluationReport {
    pub fn config(&self, name: &str) -> Option<&ConfigReport> {
        self.configs.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub config_hash: String,
    /// Adds an `analytic` row: per-element analytic borders on the nearest
    /// baseline weights.
    pub analytic: bool,
    pub max_positions: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            config_hash: String::new(),
            analytic: false,
            max_positions: DEFAULT_MAX_POSITIONS,
        }
    }
}

/// SHA-256 of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / a.len() as f64)
}

fn sample_columns(cols: &Tensor, limit: usize) -> Vec<Vec<f64>> {
    let [hidden, n] = [cols.shape()[0], cols.shape()[1]];
    let stride = n.div_ceil(limit.max(1)).max(1);
    (0..n)
        .step_by(stride)
        .map(|c| (0..hidden).map(|j| cols.data()[j * n + c]).collect())
        .collect()
}

/// Scores one quantized model against the full-precision activations and a
/// baseline's activations.
fn score(
    name: &str,
    model: &Model,
    fp_acts: &[Tensor],
    baseline_acts: &[Tensor],
    samples: &Tensor,
    labels: Option<&[usize]>,
    max_positions: usize,
) -> Result<ConfigReport> {
    let q = forward_quant(model, samples)?;
    let mut layers = Vec::new();
    for i in model.linear_indices() {
        let layer = model.linear(i)?;
        let quant = layer.quant.as_ref().ok_or(Error::MissingQuantParams(i))?;
        let w = layer.weight_matrix()?;
        let w_q = layer.quantized_weight_matrix(i)?;
        let cols = layer_columns(layer, &q.activations[i])?;
        let positions = sample_columns(&cols, max_positions);
        let ratio = superior_ratio(
            &QuantizedLinear {
                weight: &w,
                weight_q: &w_q,
                act: quant.activation,
            },
            &positions,
            &quant.border,
        )?;
        layers.push(LayerErrorReport {
            layer_id: i,
            mse_quant: mse(&q.activations[i + 1], &fp_acts[i + 1])?,
            mse_baseline: mse(&baseline_acts[i + 1], &fp_acts[i + 1])?,
            superior_ratio: ratio.ratio,
            n_positions: ratio.positions,
        });
    }
    let out = q.output();
    let accuracy = labels.map(|l| {
        let pred = class_predictions(out);
        pred.iter().zip(l).filter(|(a, b)| a == b).count() as f64 / l.len() as f64
    });
    Ok(ConfigReport {
        name: name.to_string(),
        layers,
        e2e_mse: mse(out, fp_acts.last().expect("output"))?,
        accuracy,
    })
}

/// Evaluates `candidates` on held-out samples. The first row is always the
/// nearest-rounding baseline of the first candidate; an `analytic` row
/// follows when requested.
pub fn evaluate_models(
    fp: &Model,
    candidates: &[(String, Model)],
    samples: &Tensor,
    labels: Option<&[usize]>,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    let first = &candidates
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to evaluate".into()))?
        .1;
    if let Some(l) = labels {
        if l.len() != samples.shape()[0] {
            return Err(Error::LengthMismatch {
                expected: samples.shape()[0],
                actual: l.len(),
            });
        }
    }
    for (name, m) in candidates {
        if m.input_shape != fp.input_shape || m.layers.len() != fp.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "model `{name}` does not match the full-precision model"
            )));
        }
    }
    let fp_acts = forward_fp(fp, samples)?;
    let baseline = nearest_baseline(first)?;
    let base_acts = forward_quant(&baseline, samples)?.activations;

    let mut rows: Vec<(String, Model)> = vec![("nearest".into(), baseline.clone())];
    if opts.analytic {
        rows.push(("analytic".into(), with_analytic_borders(&baseline)?));
    }
    rows.extend(candidates.iter().cloned());
    let configs = rows
        .iter()
        .map(|(name, m)| score(name, m, &fp_acts, &base_acts, samples, labels, opts.max_positions))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        seed: opts.seed,
        config_hash: opts.config_hash.clone(),
        n_samples: samples.shape()[0],
        configs,
    })
}

/// One CSV table per configuration, preceded by a comment line carrying the
/// configuration name, config hash and seed.
pub fn to_csv(report: &EvaluationReport, config: &ConfigReport) -> String {
    let mut out = format!(
        "# config={}, config_hash={}, seed={}\n{CSV_HEADER}\n",
        config.name, report.config_hash, report.seed
    );
    for l in &config.layers {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.layer_id, l.mse_quant, l.mse_baseline, l.superior_ratio, l.n_positions
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate, prepare_baseline, CalibConfig, Schedule};
    use crate::model::toy::{argmax_labels, synthetic_samples, toy_conv_net, ToyConfig};
    use crate::quantizer::BorderVariant;

    #[test]
    fn baseline_against_itself() {
        let fp = toy_conv_net(&ToyConfig::default(), 1).unwrap();
        let x = synthetic_samples(&[3, 6, 6], 16, 2).unwrap();
        let cfg = CalibConfig {
            border: BorderVariant::Constant,
            ..CalibConfig::default()
        };
        let q = prepare_baseline(&fp, &x, &cfg).unwrap();
        let labels = argmax_labels(&fp, &x).unwrap();
        let r = evaluate_models(
            &fp,
            &[("same".into(), q)],
            &x,
            Some(&labels),
            &EvalOptions::default(),
        )
        .unwrap();
        let near = r.config("nearest").unwrap();
        let same = r.config("same").unwrap();
        assert_eq!(near, &ConfigReport { name: "nearest".into(), ..same.clone() });
        for l in &same.layers {
            assert_eq!(l.mse_quant, l.mse_baseline);
            assert_eq!(l.superior_ratio, 0.0);
            assert!(l.n_positions > 0);
        }
        assert!(same.accuracy.unwrap() <= 1.0);
    }

    #[test]
    fn csv_layout_and_hash() {
        let fp = toy_conv_net(&ToyConfig::default(), 1).unwrap();
        let x = synthetic_samples(&[3, 6, 6], 32, 2).unwrap();
        let cfg = CalibConfig {
            schedule: Schedule {
                total_iters: 20,
                ..Schedule::default()
            },
            ..CalibConfig::default()
        };
        let out = calibrate(&fp, &x, &cfg).unwrap();
        let opts = EvalOptions {
            seed: 9,
            config_hash: config_hash(&cfg).unwrap(),
            analytic: true,
            ..EvalOptions::default()
        };
        let r = evaluate_models(&fp, &[("aquant".into(), out.model)], &x, None, &opts).unwrap();
        let names: Vec<_> = r.configs.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["nearest", "analytic", "aquant"]);
        let csv = to_csv(&r, &r.configs[2]);
        let lines: Vec<_> = csv.lines().collect();
        assert!(lines[0].starts_with("# config=aquant, config_hash="));
        assert!(lines[0].ends_with("seed=9"));
        assert_eq!(lines[1], CSV_HEADER);
        assert_eq!(lines.len(), 2 + 3);
        assert_eq!(opts.config_hash.len(), 64);
        assert_eq!(config_hash(&cfg).unwrap(), opts.config_hash);
    }
}
