//! Activation quantization over img2col column matrices, with the backward
//! pass used during calibration.
//!
//! The column matrix is `[hidden, n]` row-major; row `j` uses border
//! coefficients `j`, and fusion averages borders over consecutive row groups
//! within each column. Rounding uses the straight-through estimator: the
//! backward pass treats `ceil` as the identity.

use crate::quantizer::{sigmoid, BorderFunction, QuantParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Rounding {
    /// `ceil`, as deployed.
    Hard,
    /// `ceil` replaced by the identity; the loss becomes smooth almost
    /// everywhere and its true gradient equals the STE gradient.
    Surrogate,
}

const UNCLIPPED: u8 = 1;
const BORDER_INSIDE: u8 = 2;

#[derive(Debug, Default, Clone)]
pub(crate) struct ActCache {
    u: Vec<f64>,
    sig: Vec<f64>,
    level: Vec<f64>,
    flags: Vec<u8>,
}

#[derive(Debug, Clone)]
pub(crate) struct ActGrads {
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub step: f64,
}

impl ActGrads {
    pub fn zeros(bf: &BorderFunction) -> Self {
        Self {
            b0: vec![0.0; bf.b0.len()],
            b1: vec![0.0; bf.b1.len()],
            b2: vec![0.0; bf.b2.len()],
            step: 0.0,
        }
    }
}

pub(crate) struct ActQuant<'a> {
    pub params: &'a QuantParams,
    pub border: &'a BorderFunction,
    pub rounding: Rounding,
    pub alpha: f64,
    /// Columns that bypass quantization entirely.
    pub skip: Option<&'a [bool]>,
}

impl ActQuant<'_> {
    fn skipped(&self, col: usize) -> bool {
        self.skip.is_some_and(|s| s[col])
    }

    /// Writes `x + alpha * (q(x) - x)` into `out`.
    pub fn forward(
        &self,
        cols: &[f64],
        hidden: usize,
        n: usize,
        out: &mut [f64],
        cache: Option<&mut ActCache>,
    ) {
        debug_assert_eq!(self.border.rows, 1);
        debug_assert_eq!(cols.len(), hidden * n);
        let bf = self.border;
        let s = self.params.step;
        let (q_min, q_max) = (self.params.q_min as f64, self.params.q_max as f64);
        let total = hidden * n;

        let mut u = vec![0.0; total];
        let mut border = vec![0.0; total];
        let mut sig = if bf.bounded { vec![0.0; total] } else { Vec::new() };
        for j in 0..hidden {
            let row = j * n..(j + 1) * n;
            for (i, &c) in row.clone().zip(&cols[row]) {
                let uv = c / s;
                u[i] = uv;
                let raw = bf.raw_at(j, uv);
                border[i] = if bf.bounded {
                    let sv = sigmoid(raw);
                    sig[i] = sv;
                    bf.bound_scale * sv
                } else {
                    raw
                };
            }
        }
        if bf.fusion && bf.channel_size > 1 {
            fuse_rows(&mut border, hidden, n, bf.channel_size);
        }

        let mut level = vec![0.0; total];
        let mut flags = vec![0u8; total];
        for i in 0..total {
            let b = border[i];
            let mut f = 0;
            if b > 0.0 && b < 1.0 {
                f |= BORDER_INSIDE;
            }
            let z = u[i] - b.clamp(0.0, 1.0);
            let q = match self.rounding {
                Rounding::Hard => z.ceil(),
                Rounding::Surrogate => z,
            };
            if q >= q_min && q <= q_max {
                f |= UNCLIPPED;
            }
            level[i] = q.clamp(q_min, q_max);
            flags[i] = f;
        }

        for j in 0..hidden {
            for p in 0..n {
                let i = j * n + p;
                out[i] = if self.skipped(p) {
                    cols[i]
                } else if self.alpha == 1.0 {
                    s * level[i]
                } else {
                    let xq = s * level[i];
                    cols[i] + self.alpha * (xq - cols[i])
                };
            }
        }

        if let Some(c) = cache {
            c.u = u;
            c.sig = sig;
            c.level = level;
            c.flags = flags;
        }
    }

    /// Accumulates parameter gradients into `grads` and, when requested,
    /// writes the gradient with respect to the unquantized columns.
    pub fn backward(
        &self,
        hidden: usize,
        n: usize,
        cache: &ActCache,
        d_out: &[f64],
        d_cols: Option<&mut [f64]>,
        grads: &mut ActGrads,
    ) {
        let bf = self.border;
        let s = self.params.step;
        let alpha = self.alpha;
        let total = hidden * n;

        // d loss / d border (post-fusion) and the direct part of d / d u
        let mut d_border = vec![0.0; total];
        let mut d_u = vec![0.0; total];
        let mut d_step = 0.0;
        for i in 0..total {
            let p = i % n;
            if self.skipped(p) {
                continue;
            }
            let d_xq = alpha * d_out[i];
            d_step += d_xq * cache.level[i];
            if cache.flags[i] & UNCLIPPED != 0 {
                let d_z = d_xq * s;
                d_u[i] = d_z;
                if cache.flags[i] & BORDER_INSIDE != 0 {
                    d_border[i] = -d_z;
                }
            }
        }
        if bf.fusion && bf.channel_size > 1 {
            fuse_rows(&mut d_border, hidden, n, bf.channel_size);
        }

        let quadratic = !bf.b2.is_empty();
        for j in 0..hidden {
            let (mut g0, mut g1, mut g2) = (0.0, 0.0, 0.0);
            for p in 0..n {
                let i = j * n + p;
                let db = d_border[i];
                if db == 0.0 {
                    continue;
                }
                let d_raw = if bf.bounded {
                    let sv = cache.sig[i];
                    db * bf.bound_scale * sv * (1.0 - sv)
                } else {
                    db
                };
                let uv = cache.u[i];
                g0 += d_raw;
                g1 += d_raw * uv;
                let mut slope = bf.b1[j];
                if quadratic {
                    g2 += d_raw * uv * uv;
                    slope += 2.0 * bf.b2[j] * uv;
                }
                d_u[i] += d_raw * slope;
            }
            grads.b0[j] += g0;
            grads.b1[j] += g1;
            if quadratic {
                grads.b2[j] += g2;
            }
        }

        for i in 0..total {
            d_step -= d_u[i] * cache.u[i] / s;
        }
        grads.step += d_step;

        if let Some(d_cols) = d_cols {
            for i in 0..total {
                let p = i % n;
                d_cols[i] = if self.skipped(p) {
                    d_out[i]
                } else {
                    (1.0 - alpha) * d_out[i] + d_u[i] / s
                };
            }
        }
    }
}

/// Averages groups of `size` consecutive rows, independently per column.
/// The same operation is its own adjoint, so it also splits group gradients
/// equally in the backward pass.
fn fuse_rows(m: &mut [f64], hidden: usize, n: usize, size: usize) {
    for g in 0..hidden / size {
        for p in 0..n {
            let mut sum = 0.0;
            for j in g * size..(g + 1) * size {
                sum += m[j * n + p];
            }
            let mean = sum / size as f64;
            for j in g * size..(g + 1) * size {
                m[j * n + p] = mean;
            }
        }
    }
}
