//! Dense `f64` math kernels shared by the transformer and the LSTM.
//!
//! Everything is row-major and CPU-only. Forward and backward kernels
//! parallelize over disjoint rows (or columns, for per-column reductions),
//! so each output element is produced by one sequential dot product and the
//! results are bitwise identical regardless of thread count. All backward
//! kernels accumulate (`+=`) into their gradient buffers.

use crate::exec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// A row-major 2-D activation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend(row);
        }
        Self { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// One named parameter tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { name: name.into(), shape, data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn normal_fill(data: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("valid std");
    for v in data.iter_mut() {
        *v = dist.sample(rng);
    }
}

pub fn uniform_fill(data: &mut [f64], lo: f64, hi: f64, rng: &mut ChaCha8Rng) {
    let dist = Uniform::new(lo, hi).expect("valid range");
    for v in data.iter_mut() {
        *v = dist.sample(rng);
    }
}

/// `out[t][o] = dot(w[o], x[t]) + b[o]` for `x: T×I`, `w: O×I`.
pub fn linear_forward(
    x: &[f64],
    t_dim: usize,
    in_dim: usize,
    w: &[f64],
    out_dim: usize,
    b: Option<&[f64]>,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), t_dim * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(out.len(), t_dim * out_dim);
    exec::for_each_row(out, out_dim, |t, out_row| {
        let x_row = &x[t * in_dim..(t + 1) * in_dim];
        for (o, out_v) in out_row.iter_mut().enumerate() {
            let w_row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..in_dim {
                acc += w_row[i] * x_row[i];
            }
            *out_v = acc;
        }
    });
}

/// `out[t][o] += dot(w[o], x[t])`; accumulating variant used where two
/// projections sum into one pre-activation.
pub fn linear_forward_accum(
    x: &[f64],
    t_dim: usize,
    in_dim: usize,
    w: &[f64],
    out_dim: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), t_dim * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(out.len(), t_dim * out_dim);
    exec::for_each_row(out, out_dim, |t, out_row| {
        let x_row = &x[t * in_dim..(t + 1) * in_dim];
        for (o, out_v) in out_row.iter_mut().enumerate() {
            let w_row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0;
            for i in 0..in_dim {
                acc += w_row[i] * x_row[i];
            }
            *out_v += acc;
        }
    });
}

/// `dx[t][i] += dot(dy[t], w[:, i])`; the input-gradient half of a linear
/// layer's backward pass.
pub fn linear_backward_input(
    dy: &[f64],
    t_dim: usize,
    out_dim: usize,
    w: &[f64],
    in_dim: usize,
    dx: &mut [f64],
) {
    debug_assert_eq!(dy.len(), t_dim * out_dim);
    debug_assert_eq!(dx.len(), t_dim * in_dim);
    exec::for_each_row(dx, in_dim, |t, dx_row| {
        let dy_row = &dy[t * out_dim..(t + 1) * out_dim];
        for (o, &dy_v) in dy_row.iter().enumerate() {
            if dy_v == 0.0 {
                continue;
            }
            let w_row = &w[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dx_row[i] += dy_v * w_row[i];
            }
        }
    });
}

/// `dw[o][i] += sum_t dy[t][o] * x[t][i]` and `db[o] += sum_t dy[t][o]`.
pub fn linear_backward_params(
    x: &[f64],
    t_dim: usize,
    in_dim: usize,
    dy: &[f64],
    out_dim: usize,
    dw: &mut [f64],
    mut db: Option<&mut [f64]>,
) {
    debug_assert_eq!(dw.len(), out_dim * in_dim);
    exec::for_each_row(dw, in_dim, |o, dw_row| {
        for t in 0..t_dim {
            let dy_v = dy[t * out_dim + o];
            if dy_v == 0.0 {
                continue;
            }
            let x_row = &x[t * in_dim..(t + 1) * in_dim];
            for i in 0..in_dim {
                dw_row[i] += dy_v * x_row[i];
            }
        }
    });
    if let Some(db) = db.as_deref_mut() {
        for (o, db_v) in db.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..t_dim {
                acc += dy[t * out_dim + o];
            }
            *db_v += acc;
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization; caches per-row mean and reciprocal std.
pub fn layernorm_forward(
    x: &[f64],
    t_dim: usize,
    dim: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
) {
    debug_assert_eq!(x.len(), t_dim * dim);
    let means: Vec<(f64, f64)> = exec::map_ordered(&(0..t_dim).collect::<Vec<_>>(), |&t| {
        let row = &x[t * dim..(t + 1) * dim];
        let m = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / dim as f64;
        (m, 1.0 / (var + LAYERNORM_EPS).sqrt())
    });
    for (t, (m, r)) in means.iter().enumerate() {
        mean[t] = *m;
        rstd[t] = *r;
    }
    exec::for_each_row(out, dim, |t, out_row| {
        let row = &x[t * dim..(t + 1) * dim];
        let (m, r) = (mean[t], rstd[t]);
        for i in 0..dim {
            out_row[i] = (row[i] - m) * r * gamma[i] + beta[i];
        }
    });
}

/// Layer-norm backward; `dx` accumulates per row, `dgamma`/`dbeta` per
/// column (each column reduced over rows in fixed order).
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    x: &[f64],
    t_dim: usize,
    dim: usize,
    gamma: &[f64],
    mean: &[f64],
    rstd: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    exec::for_each_row(dx, dim, |t, dx_row| {
        let x_row = &x[t * dim..(t + 1) * dim];
        let dy_row = &dy[t * dim..(t + 1) * dim];
        let (m, r) = (mean[t], rstd[t]);
        let mut dnorm_mean = 0.0;
        let mut dnorm_norm_mean = 0.0;
        for i in 0..dim {
            let norm = (x_row[i] - m) * r;
            let dnorm = dy_row[i] * gamma[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= dim as f64;
        dnorm_norm_mean /= dim as f64;
        for i in 0..dim {
            let norm = (x_row[i] - m) * r;
            let dnorm = dy_row[i] * gamma[i];
            dx_row[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * r;
        }
    });
    // Column reductions: parallel over columns, sequential over rows.
    let cols: Vec<usize> = (0..dim).collect();
    let updates: Vec<(f64, f64)> = exec::map_ordered(&cols, |&i| {
        let mut dg = 0.0;
        let mut db = 0.0;
        for t in 0..t_dim {
            let norm = (x[t * dim + i] - mean[t]) * rstd[t];
            dg += dy[t * dim + i] * norm;
            db += dy[t * dim + i];
        }
        (dg, db)
    });
    for (i, (dg, db)) in updates.iter().enumerate() {
        dgamma[i] += dg;
        dbeta[i] += db;
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu_forward(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let cube = 0.044715 * v * v * v;
        *o = 0.5 * v * (1.0 + (GELU_SCALE * (v + cube)).tanh());
    }
}

pub fn gelu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..x.len() {
        let v = x[i];
        let cube = 0.044715 * v * v * v;
        let tanh_arg = GELU_SCALE * (v + cube);
        let tanh_out = tanh_arg.tanh();
        let sech2 = 1.0 - tanh_out * tanh_out;
        let local = 0.5 * (1.0 + tanh_out)
            + 0.5 * v * sech2 * GELU_SCALE * (1.0 + 3.0 * 0.044715 * v * v);
        dx[i] += dy[i] * local;
    }
}

pub fn leaky_relu_forward(x: &[f64], slope: f64, out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = if v >= 0.0 { v } else { slope * v };
    }
}

pub fn leaky_relu_backward(x: &[f64], slope: f64, dy: &[f64], dx: &mut [f64]) {
    for i in 0..x.len() {
        dx[i] += dy[i] * if x[i] >= 0.0 { 1.0 } else { slope };
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place, max-subtracted softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Inverted-dropout mask: each element is `0` with probability `p`, else
/// `1/(1-p)`, so the expected value of `mask * x` equals `x`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect()
}
