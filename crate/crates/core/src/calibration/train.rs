//! The sequential calibration driver.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_fp, forward_quant, Block, Model};
use crate::tensor::Tensor;

use super::engine::reconstruction;
use super::init::prepare_baseline;
use super::{anneal, CalibConfig, CalibGrads, CalibMode, CalibState, LossOptions, Optimizer, SegmentProblem};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MIN_STEP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub segment: usize,
    pub iter: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Learnable state of a finished segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub segment: usize,
    pub block: Block,
    pub states: Vec<CalibState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibOutcome {
    pub model: Model,
    /// `total_iters` entries per segment.
    pub log: Vec<LogEntry>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Sum over segments of the reconstruction error of each segment output
/// under the fully quantized model, against the full-precision activations.
pub fn calibration_loss(
    model: &Model,
    samples: &Tensor,
    fp_acts: &[Tensor],
    segments: &[Block],
) -> Result<f64> {
    let q = forward_quant(model, samples)?;
    let shapes = model.activation_shapes()?;
    let batch = samples.shape()[0];
    Ok(segments
        .iter()
        .map(|b| {
            reconstruction(
                q.activations[b.end].data(),
                fp_acts[b.end].data(),
                batch,
                shapes[b.end][0],
            )
        })
        .sum())
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

struct Updater {
    kind: Optimizer,
    t: i32,
}

impl Updater {
    fn apply(&self, params: &mut [f64], grads: &[f64], lr: f64, scale: f64, mom: &mut Moments) {
        if lr == 0.0 {
            return;
        }
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * scale * g;
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let g = g * scale;
                    mom.m[k] = ADAM_BETA1 * mom.m[k] + (1.0 - ADAM_BETA1) * g;
                    mom.v[k] = ADAM_BETA2 * mom.v[k] + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (mom.m[k] / c1) / ((mom.v[k] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

struct StateMoments {
    v: Moments,
    step_w: Moments,
    step_a: Moments,
    b0: Moments,
    b1: Moments,
    b2: Moments,
}

impl StateMoments {
    fn new(s: &CalibState) -> Self {
        Self {
            v: Moments::new(s.v.len()),
            step_w: Moments::new(s.step_w.len()),
            step_a: Moments::new(1),
            b0: Moments::new(s.border.b0.len()),
            b1: Moments::new(s.border.b1.len()),
            b2: Moments::new(s.border.b2.len()),
        }
    }
}

fn update_state(
    st: &mut CalibState,
    g: &CalibGrads,
    m: &mut StateMoments,
    up: &Updater,
    hidden: usize,
    input_len: usize,
) -> Result<()> {
    let lr = st.lr;
    up.apply(&mut st.v, &g.v, lr.v, 1.0, &mut m.v);

    let w_scale = 1.0 / (hidden as f64 * weight_q_max(st.weight_bits)).sqrt();
    up.apply(&mut st.step_w, &g.step_w, lr.step_w, w_scale, &mut m.step_w);
    st.step_w.iter_mut().for_each(|s| *s = s.max(MIN_STEP));

    let a_scale = 1.0 / (input_len as f64 * st.activation.q_max.max(1) as f64).sqrt();
    let mut step = [st.activation.step];
    up.apply(&mut step, &[g.step_a], lr.step_a, a_scale, &mut m.step_a);
    st.activation = st.activation.with_step(step[0].max(MIN_STEP))?;

    if st.border.variant.is_learned() {
        up.apply(&mut st.border.b0, &g.b0, lr.border, 1.0, &mut m.b0);
        // higher-order coefficients multiply powers of x in step units
        let span = st.activation.q_min.abs().max(st.activation.q_max).max(1) as f64;
        up.apply(&mut st.border.b1, &g.b1, lr.border / span, 1.0, &mut m.b1);
        up.apply(&mut st.border.b2, &g.b2, lr.border / (span * span), 1.0, &mut m.b2);
    }
    Ok(())
}

fn weight_q_max(bits: u32) -> f64 {
    ((1i64 << (bits - 1)) - 1).max(1) as f64
}

fn gather(samples: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let per = samples.len() / samples.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&samples.data()[i * per..(i + 1) * per]);
    }
    let mut shape = samples.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// [`calibrate_with_observer`] without an observer.
pub fn calibrate(fp: &Model, samples: &Tensor, config: &CalibConfig) -> Result<CalibOutcome> {
    calibrate_with_observer(fp, samples, config, &mut |_| {})
}

/// Attaches the nearest-rounding baseline, then calibrates each segment in
/// order against full-precision targets, feeding it the unquantized output
/// of the already calibrated upstream model. After `total_iters` the
/// rounding of each segment is hardened and its borders frozen. `observer`
/// sees each segment's final state.
pub fn calibrate_with_observer(
    fp: &Model,
    samples: &Tensor,
    config: &CalibConfig,
    observer: &mut dyn FnMut(&Checkpoint),
) -> Result<CalibOutcome> {
    config.validate()?;
    let n = samples.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let baseline = prepare_baseline(fp, samples, config)?;
    let fp_acts = forward_fp(fp, samples)?;
    let segments = baseline.segments(config.mode == CalibMode::Blockwise);
    let initial_loss = calibration_loss(&baseline, samples, &fp_acts, &segments)?;

    let schedule = &config.schedule;
    let batch = config.batch_size.min(n);
    let mut model = baseline;
    let mut log = Vec::with_capacity(segments.len() * schedule.total_iters);
    for (si, &block) in segments.iter().enumerate() {
        let inputs = forward_quant(&model, samples)?.activations.swap_remove(block.start);
        let targets = &fp_acts[block.end];
        let frozen = model.clone();
        let mut problem = SegmentProblem::new(&frozen, block, schedule, config.lr)?;
        let dims: Vec<(usize, usize)> = problem
            .states
            .iter()
            .map(|s| {
                let g = &frozen.linear(s.layer).expect("linear").geometry;
                (g.hidden_dim(), g.input_len())
            })
            .collect();
        let mut moments: Vec<StateMoments> = problem.states.iter().map(StateMoments::new).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(si as u64);

        for it in 0..schedule.total_iters {
            let (alpha, beta) = anneal(schedule, it)?;
            let idx = sample(&mut rng, n, batch).into_vec();
            let drop = (schedule.input_drop_prob > 0.0).then(|| {
                (0..batch)
                    .map(|_| rng.gen::<f64>() < schedule.input_drop_prob)
                    .collect()
            });
            let opts = LossOptions {
                alpha,
                beta,
                lambda: schedule.lambda,
                regularize: schedule.regularizer_active(it),
                smooth: false,
                drop,
            };
            let x = gather(&inputs, &idx)?;
            let t = gather(targets, &idx)?;
            let (parts, grads) = problem.gradients(&x, &t, &opts)?;
            if !parts.total.is_finite() || grads.iter().any(|g| !g.step_a.is_finite()) {
                return Err(Error::Diverged {
                    segment: si,
                    iter: it,
                    detail: format!(
                        "loss {} (reconstruction {}, regularizer {}), alpha {alpha}, beta {beta}",
                        parts.total, parts.reconstruction, parts.regularizer
                    ),
                });
            }
            log.push(LogEntry {
                segment: si,
                iter: it,
                loss: parts.total,
                reconstruction: parts.reconstruction,
                alpha,
                beta,
            });
            let up = Updater {
                kind: config.optimizer,
                t: i32::try_from(it + 1).unwrap_or(i32::MAX),
            };
            for (k, st) in problem.states.iter_mut().enumerate() {
                update_state(st, &grads[k], &mut moments[k], &up, dims[k].0, dims[k].1)?;
                st.alpha = alpha;
                st.beta = beta;
                st.iter = it + 1;
            }
        }
        problem.harden_into(&mut model)?;
        observer(&Checkpoint {
            segment: si,
            block,
            states: problem.states.clone(),
        });
    }
    let final_loss = calibration_loss(&model, samples, &fp_acts, &segments)?;
    Ok(CalibOutcome {
        model,
        log,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{nearest_baseline, BitWidths, Schedule};
    use crate::model::toy::{synthetic_samples, toy_conv_net, ToyConfig};
    use crate::quantizer::BorderVariant;

    fn small() -> (Model, Tensor, CalibConfig) {
        let cfg = ToyConfig {
            input_shape: [2, 4, 4],
            channels: vec![4, 4, 3],
            ..ToyConfig::default()
        };
        let fp = toy_conv_net(&cfg, 11).unwrap();
        let x = synthetic_samples(&[2, 4, 4], 64, 12).unwrap();
        let calib = CalibConfig {
            schedule: Schedule {
                total_iters: 40,
                ..Schedule::default()
            },
            batch_size: 16,
            seed: 3,
            bits: BitWidths {
                weight: 2,
                activation: 4,
                first_last: None,
            },
            ..CalibConfig::default()
        };
        (fp, x, calib)
    }

    #[test]
    fn zero_iterations_return_the_baseline() {
        let (fp, x, mut calib) = small();
        calib.schedule.total_iters = 0;
        let out = calibrate(&fp, &x, &calib).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.initial_loss, out.final_loss);
        let base = prepare_baseline(&fp, &x, &calib).unwrap();
        assert_eq!(out.model, base);
        assert_eq!(
            forward_quant(&out.model, &x).unwrap(),
            forward_quant(&nearest_baseline(&base).unwrap(), &x).unwrap()
        );
    }

    #[test]
    fn log_and_checkpoints() {
        let (fp, x, calib) = small();
        let mut seen = Vec::new();
        let out = calibrate_with_observer(&fp, &x, &calib, &mut |c| seen.push(c.block)).unwrap();
        assert_eq!(seen, fp.blocks);
        assert_eq!(out.log.len(), 3 * 40);
        let last = out.log.last().unwrap();
        assert!(last.alpha > 0.9 && last.beta < 3.0);
        assert!(out.final_loss.is_finite());
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let (fp, x, mut calib) = small();
        calib.schedule.input_drop_prob = 0.5;
        let a = calibrate(&fp, &x, &calib).unwrap();
        let b = calibrate(&fp, &x, &calib).unwrap();
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
        assert_eq!(a.model, b.model);
        calib.seed += 1;
        let c = calibrate(&fp, &x, &calib).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn weight_only_keeps_nearest_borders() {
        let (fp, x, mut calib) = small();
        calib.border = BorderVariant::Constant;
        let out = calibrate(&fp, &x, &calib).unwrap();
        for i in out.model.linear_indices() {
            let b = &out.model.linear(i).unwrap().quant.as_ref().unwrap().border;
            assert!(b.b0.iter().all(|&v| v == 0.5));
        }
    }
}
