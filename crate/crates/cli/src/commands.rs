use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use aquant_core::calibration::{
    calibrate as run_calibration, with_analytic_borders, CalibConfig, Optimizer, Schedule,
};
use aquant_core::model::io::{load_json, load_model, load_samples, save_json, save_model, save_samples, SampleSet};
use aquant_core::model::overhead::{layer_overhead, overhead_report, OverheadOptions, OverheadReport};
use aquant_core::model::toy::{argmax_labels, synthetic_samples, toy_conv_net, ToyConfig};
use aquant_core::model::{Geometry, LinearLayer, Model};
use aquant_core::report::{config_hash, evaluate_models, to_csv, EvalOptions};
use aquant_core::{BorderVariant, CalibMode, ConvGeometry, Tensor};

use crate::{BorderArg, CalibrateArgs, EvaluateArgs, GenArgs, ModeArg, OptimizerArg, OverheadArgs};

/// Seed of the `stream`-th artifact derived from a user seed.
fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

#[derive(Serialize)]
struct GenSummary<'a> {
    seed: u64,
    config_hash: String,
    toy: &'a ToyConfig,
    n_calib: usize,
    n_eval: usize,
    calib_seed: u64,
    eval_seed: u64,
}

pub fn gen(args: &GenArgs) -> Result<()> {
    let [c, h, w] = <[usize; 3]>::try_from(args.input.as_slice())
        .map_err(|_| anyhow::anyhow!("--input takes channels,height,width"))?;
    let toy = ToyConfig {
        input_shape: [c, h, w],
        channels: args.channels.clone(),
        kernel: args.kernel,
        residual: !args.no_residual,
        bias: true,
    };
    if args.n_calib == 0 || args.n_eval == 0 {
        bail!("sample counts must be positive");
    }
    let model = toy_conv_net(&toy, args.seed)?;
    let shape = toy.input_shape;
    let mut sets = Vec::new();
    for (stream, n) in [(1, args.n_calib), (2, args.n_eval)] {
        let seed = derived_seed(args.seed, stream);
        let samples = synthetic_samples(&shape, n, seed)?;
        let labels = argmax_labels(&model, &samples)?;
        sets.push(SampleSet {
            samples,
            labels: Some(labels),
            seed,
        });
    }
    let summary = GenSummary {
        seed: args.seed,
        config_hash: config_hash(&toy)?,
        toy: &toy,
        n_calib: args.n_calib,
        n_eval: args.n_eval,
        calib_seed: sets[0].seed,
        eval_seed: sets[1].seed,
    };
    save_model(&model, &args.out.join("model"))?;
    save_samples(&sets[0], &args.out.join("calib"))?;
    save_samples(&sets[1], &args.out.join("eval"))?;
    save_json(&summary, &args.out.join("gen.json"))?;
    println!(
        "wrote model ({} layers), {} calibration and {} evaluation samples to {}",
        model.layers.len(),
        args.n_calib,
        args.n_eval,
        args.out.display()
    );
    Ok(())
}

fn parse_first_last(v: &str) -> Result<Option<u32>> {
    if v == "none" {
        return Ok(None);
    }
    Ok(Some(v.parse().with_context(|| format!("--bits-first-last takes a bitwidth or `none`, got `{v}`"))?))
}

/// Loads the config file, applies flag overrides and validates the result.
pub fn resolve_config(args: &CalibrateArgs) -> Result<CalibConfig> {
    let mut cfg: CalibConfig = match &args.config {
        Some(path) => load_json(path).with_context(|| format!("reading config {}", path.display()))?,
        None => CalibConfig::default(),
    };
    if let Some(b) = args.bits_w {
        cfg.bits.weight = b;
    }
    if let Some(b) = args.bits_a {
        cfg.bits.activation = b;
    }
    if let Some(v) = &args.bits_first_last {
        cfg.bits.first_last = parse_first_last(v)?;
    }
    if let Some(b) = args.border {
        cfg.border = match b {
            BorderArg::Nearest | BorderArg::Analytic => BorderVariant::Constant,
            BorderArg::Linear => BorderVariant::CoarseLinear,
            BorderArg::Quadratic => BorderVariant::CoarseQuadratic,
        };
    }
    if let Some(f) = args.fusion {
        cfg.fusion = f;
    }
    if let Some(p) = args.drop_prob {
        cfg.schedule.input_drop_prob = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.iters {
        cfg.schedule.total_iters = n;
    }
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Layerwise => CalibMode::Layerwise,
            ModeArg::Blockwise => CalibMode::Blockwise,
        };
    }
    if let Some(o) = args.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        };
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    let default = Schedule::default();
    let untouched = cfg.schedule.beta_start == default.beta_start && cfg.schedule.lambda == default.lambda;
    if cfg.border.is_learned() && !args.plain_schedule && untouched {
        cfg.schedule = cfg.schedule.for_learned_borders();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct CalibSummary<'a> {
    seed: u64,
    config_hash: String,
    config: &'a CalibConfig,
    analytic_borders: bool,
    initial_loss: f64,
    final_loss: f64,
    log_entries: usize,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let fp = load_model(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let set = load_samples(&args.calib).with_context(|| format!("loading samples {}", args.calib.display()))?;
    let out = run_calibration(&fp, &set.samples, &cfg)?;
    let analytic = args.border == Some(BorderArg::Analytic);
    let model = if analytic {
        with_analytic_borders(&out.model)?
    } else {
        out.model
    };
    let hash = config_hash(&cfg)?;

    let mut csv = format!(
        "# config_hash={hash}, seed={}\nsegment,iter,loss,reconstruction,alpha,beta\n",
        cfg.seed
    );
    for e in &out.log {
        writeln!(csv, "{},{},{},{},{},{}", e.segment, e.iter, e.loss, e.reconstruction, e.alpha, e.beta)?;
    }
    save_model(&model, &args.out.join("model"))?;
    fs::write(args.out.join("log.csv"), csv)?;
    save_json(&out.log, &args.out.join("log.json"))?;
    save_json(
        &CalibSummary {
            seed: cfg.seed,
            config_hash: hash,
            config: &cfg,
            analytic_borders: analytic,
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
            log_entries: out.log.len(),
        },
        &args.out.join("summary.json"),
    )?;
    println!(
        "calibration loss {:.6} -> {:.6} over {} iterations; wrote {}",
        out.initial_loss,
        out.final_loss,
        out.log.len(),
        args.out.display()
    );
    Ok(())
}

/// Accepts either a model directory or a `calibrate` output directory.
fn model_dir(path: &Path) -> PathBuf {
    let nested = path.join("model");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Row name for a candidate given without an explicit name.
fn default_name(model: &Model) -> &'static str {
    let variants: Vec<BorderVariant> = model
        .linear_indices()
        .into_iter()
        .filter_map(|i| model.linear(i).ok()?.quant.as_ref().map(|q| q.border.variant))
        .collect();
    if variants.iter().any(|v| v.is_learned()) {
        "aquant"
    } else if variants.contains(&BorderVariant::ElementLinear) {
        "analytic_calibrated"
    } else {
        "weight_only"
    }
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    candidates: &'a [String],
    analytic: bool,
    max_positions: usize,
    seed: u64,
    n_samples: usize,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let fp = load_model(&args.fp).with_context(|| format!("loading model {}", args.fp.display()))?;
    let set = load_samples(&args.eval).with_context(|| format!("loading samples {}", args.eval.display()))?;
    let mut candidates: Vec<(String, Model)> = Vec::new();
    for spec in &args.candidates {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (Some(n.to_string()), p),
            None => (None, spec.as_str()),
        };
        let model = load_model(&model_dir(Path::new(path))).with_context(|| format!("loading candidate {path}"))?;
        let mut name = name.unwrap_or_else(|| default_name(&model).to_string());
        if ["nearest", "analytic"].contains(&name.as_str()) || candidates.iter().any(|(n, _)| *n == name) {
            name = format!("{name}_{}", candidates.len());
        }
        candidates.push((name, model));
    }
    let names: Vec<String> = candidates.iter().map(|(n, _)| n.clone()).collect();
    let settings = EvalSettings {
        candidates: &names,
        analytic: args.analytic,
        max_positions: args.max_positions,
        seed: args.seed,
        n_samples: set.len(),
    };
    let opts = EvalOptions {
        seed: args.seed,
        config_hash: config_hash(&settings)?,
        analytic: args.analytic,
        max_positions: args.max_positions,
    };
    let report = evaluate_models(&fp, &candidates, &set.samples, set.labels.as_deref(), &opts)?;
    save_json(&report, &args.out.join("report.json"))?;
    for c in &report.configs {
        fs::write(args.out.join(format!("{}.csv", c.name)), to_csv(&report, c))?;
    }
    println!("{:<24} {:>14} {:>10}", "config", "e2e_mse", "accuracy");
    for c in &report.configs {
        let acc = c.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("{:<24} {:>14.6e} {:>10}", c.name, c.e2e_mse, acc);
    }
    Ok(())
}

fn parse_dims<const N: usize>(s: &str) -> Result<[usize; N]> {
    let dims = s
        .split(',')
        .map(|v| v.trim().parse::<usize>().with_context(|| format!("invalid dimension `{v}`")))
        .collect::<Result<Vec<_>>>()?;
    let n = dims.len();
    dims.try_into().map_err(|_| anyhow::anyhow!("expected {N} dimensions, got {n}"))
}

fn synthetic_layers(args: &OverheadArgs) -> Result<Vec<(String, LinearLayer)>> {
    let mut layers = Vec::new();
    for c in &args.conv {
        let [o_c, i_c, k] = parse_dims(c).context("--conv takes o_c,i_c,k")?;
        let g = Geometry::Conv(ConvGeometry::same(o_c, i_c, k, k, k)?);
        let w = Tensor::zeros(g.weight_shape())?;
        layers.push((format!("conv{}", layers.len()), LinearLayer::new(g, w, None)?));
    }
    for f in &args.fc {
        let [in_features, out_features] = parse_dims(f).context("--fc takes in,out")?;
        let g = Geometry::Fc {
            in_features,
            out_features,
        };
        let w = Tensor::zeros(g.weight_shape())?;
        layers.push((format!("fc{}", layers.len()), LinearLayer::new(g, w, None)?));
    }
    Ok(layers)
}

fn print_overhead(r: &OverheadReport) {
    println!(
        "{:<6} {:<12} {:<16} {:>6} {:>8} {:>14} {:>14} {:>14}",
        "id", "name", "border", "o_c", "hidden", "params", "size", "ops"
    );
    for l in &r.layers {
        println!(
            "{:<6} {:<12} {:<16} {:>6} {:>8} {:>13.4}% {:>13.4}% {:>13.4}%",
            l.layer_id,
            l.name,
            format!("{:?}", l.variant),
            l.out_channels,
            l.hidden,
            100.0 * l.param_ratio.value,
            100.0 * l.size_ratio.value,
            100.0 * l.ops_ratio.value
        );
    }
    println!(
        "{:<6} {:<12} {:<16} {:>6} {:>8} {:>13.4}% {:>13.4}% {:>13.4}%",
        "total",
        "",
        "",
        "",
        "",
        100.0 * r.param_ratio.value,
        100.0 * r.size_ratio.value,
        100.0 * r.ops_ratio.value
    );
}

fn overhead_csv(r: &OverheadReport) -> String {
    let mut out = String::from(
        "layer_id,name,variant,out_channels,hidden,border_params,weight_params,bits_weight,param_ratio,size_ratio,ops_ratio\n",
    );
    for l in &r.layers {
        let _ = writeln!(
            out,
            "{},{},{:?},{},{},{},{},{},{},{},{}",
            l.layer_id,
            l.name,
            l.variant,
            l.out_channels,
            l.hidden,
            l.border_params,
            l.weight_params,
            l.bits_weight,
            l.param_ratio.value,
            l.size_ratio.value,
            l.ops_ratio.value
        );
    }
    out
}

pub fn overhead(args: &OverheadArgs) -> Result<()> {
    let opts = OverheadOptions {
        bits_border: args.bits_border,
        bits_weight: args.bits_weight,
        variant: args.border.map(|b| match b {
            BorderArg::Nearest => BorderVariant::Constant,
            BorderArg::Analytic => BorderVariant::ElementLinear,
            BorderArg::Linear => BorderVariant::CoarseLinear,
            BorderArg::Quadratic => BorderVariant::CoarseQuadratic,
        }),
        fusion: args.fusion,
    };
    if args.bits_border == 0 || args.bits_weight == Some(0) {
        bail!("bitwidths must be positive");
    }
    let report = match &args.model {
        Some(path) => {
            if !args.conv.is_empty() || !args.fc.is_empty() {
                bail!("--model cannot be combined with --conv or --fc");
            }
            overhead_report(&load_model(path)?, &opts)
        }
        None => {
            let layers = synthetic_layers(args)?;
            layer_overhead(layers.iter().enumerate().map(|(i, (n, l))| (i, n.as_str(), l)), &opts)
        }
    };
    print_overhead(&report);
    if let Some(out) = &args.out {
        save_json(&report, &out.join("overhead.json"))?;
        fs::write(out.join("overhead.csv"), overhead_csv(&report))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse_and_reject_wrong_arity() {
        assert_eq!(parse_dims::<3>("64, 16,3").unwrap(), [64, 16, 3]);
        assert!(parse_dims::<3>("64,16").is_err());
        assert!(parse_dims::<2>("a,3").is_err());
    }

    #[test]
    fn first_last_accepts_none() {
        assert_eq!(parse_first_last("none").unwrap(), None);
        assert_eq!(parse_first_last("8").unwrap(), Some(8));
        assert!(parse_first_last("eight").is_err());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derived_seed(0, 1), derived_seed(0, 2));
        assert_ne!(derived_seed(1, 1), derived_seed(2, 1));
    }
}
