//! Dense row-major tensors and the layout transforms used to lower
//! convolution onto matrix multiplication.
//!
//! A convolution filter of shape `[o_c, i_c, k, k]` is viewed as the matrix
//! `[o_c, i_c*k*k]` and the input feature map `[i_c, h_i, w_i]` is unrolled by
//! [`img2col`] into `[i_c*k*k, h_o*w_o]`, so the convolution becomes a single
//! [`matmul`]. Row `i*k*k + r*k + c` of the unrolled input lines up with
//! column `(i, r, c)` of the reshaped filter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many multiply-adds the kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidShape("tensor must have rank >= 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimension sizes must be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element at a multi-index, row-major.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Geometry of one 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub o_c: usize,
    pub i_c: usize,
    pub k: usize,
    pub h_i: usize,
    pub w_i: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        o_c: usize,
        i_c: usize,
        k: usize,
        h_i: usize,
        w_i: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let g = Self {
            o_c,
            i_c,
            k,
            h_i,
            w_i,
            stride,
            padding,
        };
        g.validate()?;
        Ok(g)
    }

    /// Stride 1 with `k / 2` padding, which keeps the spatial size for odd `k`.
    pub fn same(o_c: usize, i_c: usize, k: usize, h_i: usize, w_i: usize) -> Result<Self> {
        Self::new(o_c, i_c, k, h_i, w_i, 1, k / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.o_c, self.i_c, self.k, self.h_i, self.w_i, self.stride].contains(&0) {
            return Err(Error::InvalidShape(format!(
                "convolution geometry fields must be >= 1: {self:?}"
            )));
        }
        if self.h_i + 2 * self.padding < self.k || self.w_i + 2 * self.padding < self.k {
            return Err(Error::InvalidShape(format!(
                "kernel {} larger than padded input {}x{}",
                self.k,
                self.h_i + 2 * self.padding,
                self.w_i + 2 * self.padding
            )));
        }
        Ok(())
    }

    pub fn h_o(&self) -> usize {
        (self.h_i + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn w_o(&self) -> usize {
        (self.w_i + 2 * self.padding - self.k) / self.stride + 1
    }

    /// Length of one unrolled sliding block, `i_c * k * k`.
    pub fn hidden_dim(&self) -> usize {
        self.i_c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_o() * self.w_o()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.i_c, self.h_i, self.w_i]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.o_c, self.h_o(), self.w_o()]
    }

    pub fn filter_shape(&self) -> [usize; 4] {
        [self.o_c, self.i_c, self.k, self.k]
    }
}

/// Views a `[o_c, i_c, k, k]` filter as the matrix `[o_c, i_c*k*k]`.
pub fn reshape_filter(filter: &Tensor) -> Result<Tensor> {
    match *filter.shape() {
        [o_c, i_c, kh, kw] if kh == kw => filter.reshape(vec![o_c, i_c * kh * kw]),
        _ => Err(Error::InvalidShape(format!(
            "expected a square [o_c, i_c, k, k] filter, got {:?}",
            filter.shape()
        ))),
    }
}

/// Unrolls `[i_c, h_i, w_i]` into `[i_c*k*k, h_o*w_o]`; padded taps read 0.0.
pub fn img2col(input: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    geom.validate()?;
    if input.shape() != geom.input_shape() {
        return Err(Error::InvalidShape(format!(
            "img2col input {:?} does not match geometry {:?}",
            input.shape(),
            geom.input_shape()
        )));
    }
    let rows = geom.hidden_dim();
    let cols = geom.positions();
    let mut out = vec![0.0; rows * cols];
    img2col_into(input.data(), geom, &mut out, cols, 0);
    Tensor::new(vec![rows, cols], out)
}

/// Writes the unrolled blocks of one sample into `out`, a row-major matrix
/// with `ld` columns, starting at column `col0`.
pub(crate) fn img2col_into(
    input: &[f64],
    geom: &ConvGeometry,
    out: &mut [f64],
    ld: usize,
    col0: usize,
) {
    let (k, h_i, w_i) = (geom.k, geom.h_i, geom.w_i);
    let (h_o, w_o) = (geom.h_o(), geom.w_o());
    let pad = geom.padding as isize;
    for c in 0..geom.i_c {
        for r in 0..k {
            for s in 0..k {
                let row = (c * k + r) * k + s;
                let dst = &mut out[row * ld + col0..row * ld + col0 + h_o * w_o];
                for oy in 0..h_o {
                    let iy = (oy * geom.stride + r) as isize - pad;
                    for ox in 0..w_o {
                        let ix = (ox * geom.stride + s) as isize - pad;
                        dst[oy * w_o + ox] =
                            if iy >= 0 && iy < h_i as isize && ix >= 0 && ix < w_i as isize {
                                input[(c * h_i + iy as usize) * w_i + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`img2col_into`]: scatters-and-adds columns back into an input
/// gradient buffer. Contributions landing on padding are dropped.
pub(crate) fn col2img_add(
    cols: &[f64],
    geom: &ConvGeometry,
    ld: usize,
    col0: usize,
    grad_input: &mut [f64],
) {
    let (k, h_i, w_i) = (geom.k, geom.h_i, geom.w_i);
    let (h_o, w_o) = (geom.h_o(), geom.w_o());
    let pad = geom.padding as isize;
    for c in 0..geom.i_c {
        for r in 0..k {
            for s in 0..k {
                let row = (c * k + r) * k + s;
                let src = &cols[row * ld + col0..row * ld + col0 + h_o * w_o];
                for oy in 0..h_o {
                    let iy = (oy * geom.stride + r) as isize - pad;
                    if iy < 0 || iy >= h_i as isize {
                        continue;
                    }
                    for ox in 0..w_o {
                        let ix = (ox * geom.stride + s) as isize - pad;
                        if ix >= 0 && ix < w_i as isize {
                            grad_input[(c * h_i + iy as usize) * w_i + ix as usize] +=
                                src[oy * w_o + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = as_matrix(a)?;
    let (n2, p) = as_matrix(b)?;
    if n != n2 {
        return Err(Error::InvalidShape(format!(
            "matmul inner dimensions disagree: [{m},{n}] x [{n2},{p}]"
        )));
    }
    let mut out = vec![0.0; m * p];
    gemm(a.data(), b.data(), &mut out, m, n, p);
    Tensor::new(vec![m, p], out)
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::InvalidShape(format!(
            "expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

/// `out[m,p] = a[m,n] * b[n,p]`. Rows are independent, so the parallel split
/// does not change the summation order.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let row = |(i, out_row): (usize, &mut [f64])| {
        out_row.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * p..(l + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * n * p >= PAR_THRESHOLD {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
}

/// `out[m,p] = a[m,n] * b[p,n]^T`.
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * n * p >= PAR_THRESHOLD {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
}

/// `out[m,p] = a[n,m]^T * b[n,p]`.
pub(crate) fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let row = |(i, out_row): (usize, &mut [f64])| {
        out_row.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..n {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * p..(l + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * n * p >= PAR_THRESHOLD {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
}
