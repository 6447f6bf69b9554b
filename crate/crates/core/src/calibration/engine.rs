//! Batched forward and backward passes over one calibration segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ActCache, ActGrads, ActQuant, Rounding};
use crate::model::{apply_fp_layer, lower, lower_adjoint, raise, raise_adjoint, Block, Layer, Model};
use crate::quantizer::QuantParams;
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

use super::{
    inverse_rectified_sigmoid, rectified_sigmoid, rectified_sigmoid_grad, regularizer,
    regularizer_grad, CalibState, LearningRates, Schedule,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOptions {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub regularize: bool,
    /// Replaces `ceil` in activation rounding by the identity.
    pub smooth: bool,
    /// Per-sample flags; a flagged sample bypasses quantization of the
    /// segment input in the first linear layer.
    pub drop: Option<Vec<bool>>,
}

impl LossOptions {
    /// Fully quantized forward without the regularizer.
    pub fn hard() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            lambda: 0.0,
            regularize: false,
            smooth: false,
            drop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub regularizer: f64,
}

/// Gradients for one layer's [`CalibState`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibGrads {
    pub v: Vec<f64>,
    pub step_w: Vec<f64>,
    pub step_a: f64,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

struct SoftWeight {
    w: Vec<f64>,
    level: Vec<f64>,
    unclipped: Vec<bool>,
}

struct LinearCache {
    qcols: Vec<f64>,
    act: ActCache,
    soft: SoftWeight,
}

/// One layer or block being calibrated, with the learnable state of each of
/// its linear layers.
#[derive(Debug, Clone)]
pub struct SegmentProblem<'a> {
    model: &'a Model,
    block: Block,
    pub states: Vec<CalibState>,
    /// `slots[i - block.start]` is the state index of layer `i`.
    slots: Vec<Option<usize>>,
}

/// Sum over channels of squared differences, averaged over samples and
/// spatial positions.
pub(crate) fn reconstruction(y: &[f64], target: &[f64], batch: usize, channels: usize) -> f64 {
    let positions = y.len() / (batch * channels);
    let sq: f64 = y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (batch * positions) as f64
}

impl<'a> SegmentProblem<'a> {
    /// Initializes states from a model whose linear layers carry their
    /// baseline quantization. Logits start at the fractional part of
    /// `W / s`, nudged so that hardening reproduces the baseline levels.
    pub fn new(model: &'a Model, block: Block, schedule: &Schedule, lr: LearningRates) -> Result<Self> {
        if block.start >= block.end || block.end > model.layers.len() {
            return Err(Error::InvalidArgument(format!("bad segment {block:?}")));
        }
        let mut states = Vec::new();
        let mut slots = Vec::new();
        for i in block.start..block.end {
            let Layer::Linear(l) = &model.layers[i].layer else {
                slots.push(None);
                continue;
            };
            let q = l.quant.as_ref().ok_or(Error::MissingQuantParams(i))?;
            let w = l.weight_matrix()?;
            let per = w.len() / q.weight_steps.len();
            let v = w
                .data()
                .iter()
                .zip(&q.weight_levels)
                .enumerate()
                .map(|(k, (&wv, &level))| {
                    let u = wv / q.weight_steps[k / per];
                    let fl = u.floor();
                    let up = level as f64 > fl;
                    let v = inverse_rectified_sigmoid(u - fl);
                    match (up, v >= 0.0) {
                        (true, false) => 0.0,
                        (false, true) => -1e-6,
                        _ => v,
                    }
                })
                .collect();
            slots.push(Some(states.len()));
            states.push(CalibState {
                layer: i,
                v,
                step_w: q.weight_steps.clone(),
                weight_bits: q.weight_bits,
                activation: q.activation,
                border: q.border.clone(),
                alpha: 0.0,
                beta: schedule.beta_start,
                lambda: schedule.lambda,
                iter: 0,
                lr,
            });
        }
        if states.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "segment {block:?} has no linear layer"
            )));
        }
        if states.iter().any(|s| s.border.is_per_row()) {
            return Err(Error::InvalidArgument(
                "per-element borders cannot be calibrated".into(),
            ));
        }
        Ok(Self {
            model,
            block,
            states,
            slots,
        })
    }

    pub fn block(&self) -> Block {
        self.block
    }

    fn check_io(&self, input: &Tensor, target: &Tensor) -> Result<(usize, usize)> {
        let shapes = self.model.activation_shapes()?;
        let (si, so) = (&shapes[self.block.start], &shapes[self.block.end]);
        let batch = input.shape().first().copied().unwrap_or(0);
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if input.shape()[1..] != si[..] || target.shape()[0] != batch || target.shape()[1..] != so[..] {
            return Err(Error::InvalidShape(format!(
                "segment expects [{batch}, {si:?}] -> [{batch}, {so:?}], got {:?} -> {:?}",
                input.shape(),
                target.shape()
            )));
        }
        Ok((batch, so[0]))
    }

    fn soft_weight(&self, state: &CalibState, w: &Tensor) -> Result<SoftWeight> {
        let per = w.len() / state.step_w.len();
        let bits = state.weight_bits;
        let mut out = SoftWeight {
            w: Vec::with_capacity(w.len()),
            level: Vec::with_capacity(w.len()),
            unclipped: Vec::with_capacity(w.len()),
        };
        let mut params: Option<QuantParams> = None;
        for (k, (&wv, &vv)) in w.data().iter().zip(&state.v).enumerate() {
            if k % per == 0 {
                params = Some(QuantParams::new(bits, state.step_w[k / per], true)?);
            }
            let p = params.as_ref().expect("set at channel start");
            let raw = (wv / p.step).floor() + rectified_sigmoid(vv);
            let level = p.clip_level(raw);
            out.w.push(p.step * level);
            out.level.push(level);
            out.unclipped.push(raw >= p.q_min as f64 && raw <= p.q_max as f64);
        }
        Ok(out)
    }

    fn forward(
        &self,
        input: &Tensor,
        batch: usize,
        opts: &LossOptions,
    ) -> Result<(Vec<Vec<f64>>, Vec<Option<LinearCache>>)> {
        let skip: Option<Vec<bool>> = match &opts.drop {
            Some(d) if d.len() != batch => {
                return Err(Error::LengthMismatch {
                    expected: batch,
                    actual: d.len(),
                })
            }
            Some(d) => Some(d.clone()),
            None => None,
        };
        let rounding = if opts.smooth { Rounding::Surrogate } else { Rounding::Hard };
        let mut acts = vec![input.data().to_vec()];
        let mut caches = Vec::new();
        let mut first_linear = true;
        for (off, i) in (self.block.start..self.block.end).enumerate() {
            let layer = &self.model.layers[i].layer;
            let Some(si) = self.slots[off] else {
                acts.push(apply_fp_layer(layer, &acts, self.block.start, batch)?);
                caches.push(None);
                continue;
            };
            let Layer::Linear(l) = layer else { unreachable!("slot on a linear layer") };
            let st = &self.states[si];
            let g = &l.geometry;
            let (o_c, hidden, n) = (g.out_channels(), g.hidden_dim(), batch * g.positions());
            let cols = lower(g, &acts[off], batch);
            let col_skip: Option<Vec<bool>> = match (&skip, first_linear) {
                (Some(d), true) => {
                    let p = g.positions();
                    Some((0..n).map(|c| d[c / p]).collect())
                }
                _ => None,
            };
            first_linear = false;
            let mut qcols = vec![0.0; cols.len()];
            let mut act = ActCache::default();
            ActQuant {
                params: &st.activation,
                border: &st.border,
                rounding,
                alpha: opts.alpha,
                skip: col_skip.as_deref(),
            }
            .forward(&cols, hidden, n, &mut qcols, Some(&mut act));
            let soft = self.soft_weight(st, &l.weight_matrix()?)?;
            let mut y = vec![0.0; o_c * n];
            gemm(&soft.w, &qcols, &mut y, o_c, hidden, n);
            let bias = l
                .quant
                .as_ref()
                .and_then(|q| q.bias_q.as_deref())
                .or(l.bias.as_deref());
            acts.push(raise(g, &y, batch, bias));
            caches.push(Some(LinearCache { qcols, act, soft }));
        }
        Ok((acts, caches))
    }

    fn regularizer_total(&self, opts: &LossOptions) -> f64 {
        if !opts.regularize {
            return 0.0;
        }
        self.states
            .iter()
            .map(|s| regularizer(&s.v, opts.beta, opts.lambda))
            .sum()
    }

    /// Reconstruction error of the segment output against `target`, plus
    /// the rounding regularizer when enabled.
    pub fn loss(&self, input: &Tensor, target: &Tensor, opts: &LossOptions) -> Result<LossParts> {
        let (batch, channels) = self.check_io(input, target)?;
        let (acts, _) = self.forward(input, batch, opts)?;
        let rec = reconstruction(acts.last().expect("output"), target.data(), batch, channels);
        let reg = self.regularizer_total(opts);
        Ok(LossParts {
            total: rec + reg,
            reconstruction: rec,
            regularizer: reg,
        })
    }

    /// Loss and its gradient for every state, using the straight-through
    /// estimator for activation rounding. Step gradients are unscaled.
    pub fn gradients(
        &self,
        input: &Tensor,
        target: &Tensor,
        opts: &LossOptions,
    ) -> Result<(LossParts, Vec<CalibGrads>)> {
        let (batch, channels) = self.check_io(input, target)?;
        let (acts, caches) = self.forward(input, batch, opts)?;
        let out = acts.last().expect("output");
        let rec = reconstruction(out, target.data(), batch, channels);
        let reg = self.regularizer_total(opts);
        let positions = out.len() / (batch * channels);
        let scale = 2.0 / (batch * positions) as f64;

        let mut d_acts: Vec<Vec<f64>> = acts.iter().map(|a| vec![0.0; a.len()]).collect();
        let last = d_acts.len() - 1;
        for ((d, y), t) in d_acts[last].iter_mut().zip(out).zip(target.data()) {
            *d = scale * (y - t);
        }
        let mut grads: Vec<Option<CalibGrads>> = vec![None; self.states.len()];
        let rounding = if opts.smooth { Rounding::Surrogate } else { Rounding::Hard };

        for off in (0..self.block.end - self.block.start).rev() {
            let i = self.block.start + off;
            let d_out = std::mem::take(&mut d_acts[off + 1]);
            match &self.model.layers[i].layer {
                Layer::Relu => {
                    for ((d, &g), &x) in d_acts[off].iter_mut().zip(&d_out).zip(&acts[off]) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                }
                Layer::ResidualAdd { from } => {
                    for (d, &g) in d_acts[off].iter_mut().zip(&d_out) {
                        *d += g;
                    }
                    for (d, &g) in d_acts[from - self.block.start].iter_mut().zip(&d_out) {
                        *d += g;
                    }
                }
                Layer::Linear(l) => {
                    let si = self.slots[off].expect("linear slot");
                    let st = &self.states[si];
                    let cache = caches[off].as_ref().expect("linear cache");
                    let g = &l.geometry;
                    let (o_c, hidden, n) = (g.out_channels(), g.hidden_dim(), batch * g.positions());
                    let d_y = raise_adjoint(g, &d_out, batch);

                    let mut d_w = vec![0.0; o_c * hidden];
                    gemm_bt(&d_y, &cache.qcols, &mut d_w, o_c, n, hidden);
                    let mut d_q = vec![0.0; hidden * n];
                    gemm_at(&cache.soft.w, &d_y, &mut d_q, hidden, o_c, n);

                    let first_linear = self.slots[..off].iter().all(Option::is_none);
                    let col_skip: Option<Vec<bool>> = match (&opts.drop, first_linear) {
                        (Some(d), true) => {
                            let p = g.positions();
                            Some((0..n).map(|c| d[c / p]).collect())
                        }
                        _ => None,
                    };
                    let quant = ActQuant {
                        params: &st.activation,
                        border: &st.border,
                        rounding,
                        alpha: opts.alpha,
                        skip: col_skip.as_deref(),
                    };
                    let mut act_grads = ActGrads::zeros(&st.border);
                    let needs_input = off > 0;
                    let mut d_cols = if needs_input { vec![0.0; hidden * n] } else { Vec::new() };
                    quant.backward(
                        hidden,
                        n,
                        &cache.act,
                        &d_q,
                        needs_input.then_some(d_cols.as_mut_slice()),
                        &mut act_grads,
                    );
                    if needs_input {
                        lower_adjoint(g, &d_cols, batch, &mut d_acts[off]);
                    }

                    let per = hidden;
                    let mut d_v = vec![0.0; d_w.len()];
                    let mut d_sw = vec![0.0; o_c];
                    for (k, &dw) in d_w.iter().enumerate() {
                        let o = k / per;
                        d_sw[o] += dw * cache.soft.level[k];
                        if cache.soft.unclipped[k] {
                            d_v[k] = dw * st.step_w[o] * rectified_sigmoid_grad(st.v[k]);
                        }
                    }
                    if opts.regularize {
                        for (d, &v) in d_v.iter_mut().zip(&st.v) {
                            *d += regularizer_grad(v, opts.beta, opts.lambda);
                        }
                    }
                    grads[si] = Some(CalibGrads {
                        v: d_v,
                        step_w: d_sw,
                        step_a: act_grads.step,
                        b0: act_grads.b0,
                        b1: act_grads.b1,
                        b2: act_grads.b2,
                    });
                }
            }
        }
        let parts = LossParts {
            total: rec + reg,
            reconstruction: rec,
            regularizer: reg,
        };
        Ok((parts, grads.into_iter().map(|g| g.expect("every state visited")).collect()))
    }

    /// Writes hardened weights, learned steps and frozen borders back into
    /// `model`.
    pub fn harden_into(&self, model: &mut Model) -> Result<()> {
        for st in &self.states {
            let layer = model.layers[st.layer]
                .linear_mut()
                .ok_or_else(|| Error::InvalidArgument(format!("layer {} is not linear", st.layer)))?;
            let w = layer.weight_matrix()?;
            let levels = st.hardened_levels(&w)?;
            let q = layer.quant.as_mut().ok_or(Error::MissingQuantParams(st.layer))?;
            q.weight_levels = levels;
            q.weight_steps = st.step_w.clone();
            q.activation = st.activation;
            q.border = st.border.clone();
        }
        model.validate()
    }
}
