//! Scalar kernels behind the tape primitives.
//!
//! Everything here computes in `f64` regardless of how tensors are stored;
//! the tape widens `f32` buffers on entry and narrows results on exit. That
//! keeps accumulation error far below the tolerances the gradient and
//! equivalence checks pin down, and lets the replay path reuse the exact same
//! code at full precision.

use std::f64::consts::PI;

/// (n x k) times (k x m), row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * m..(i + 1) * m];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * m..(kk + 1) * m];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
    c
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub(crate) fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub(crate) fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| x * c).collect()
}

/// Row-wise softmax with the usual max-subtraction for stability.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut denom = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - hi).exp();
            denom += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= denom;
        }
    }
    out
}

/// d softmax: dx = y * (dy - sum(dy * y)) per row.
pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((dxi, &yi), &dyi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(dyr) {
            *dxi = yi * (dyi - dot);
        }
    }
    dx
}

pub(crate) fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// d sigmoid from the forward output: y * (1 - y).
pub(crate) fn sigmoid_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(&yi, &di)| di * yi * (1.0 - yi)).collect()
}

/// Gaussian-CDF gelu: 0.5 * x * (1 + erf(x / sqrt(2))).
pub(crate) fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d gelu: Phi(x) + x * phi(x).
pub(crate) fn gelu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&xi, &di)| {
            let cdf = 0.5 * (1.0 + libm::erf(xi / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * xi * xi).exp() / (2.0 * PI).sqrt();
            di * (cdf + xi * pdf)
        })
        .collect()
}

/// Row-wise normalization to zero mean / unit variance (population variance,
/// no learned affine; modulation supplies scale and shift elsewhere).
pub(crate) fn layer_norm(x: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
    }
    out
}

/// d layer_norm: dx = rstd * (dy - mean(dy) - xhat * mean(dy * xhat)) per row.
pub(crate) fn layer_norm_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> Vec<f64> {
    let n = cols as f64;
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        let mean_dy: f64 = dyr.iter().sum::<f64>() / n;
        let mean_dy_xhat: f64 = row
            .iter()
            .zip(dyr)
            .map(|(&xi, &di)| di * (xi - mean) * rstd)
            .sum::<f64>()
            / n;
        for ((d, &xi), &di) in dx[r * cols..(r + 1) * cols].iter_mut().zip(row).zip(dyr) {
            let xhat = (xi - mean) * rstd;
            *d = rstd * (di - mean_dy - xhat * mean_dy_xhat);
        }
    }
    dx
}

/// Keep rows where the mask is set, preserving order.
pub(crate) fn gather_rows(x: &[f64], cols: usize, mask: &[bool]) -> Vec<f64> {
    let mut out = Vec::with_capacity(mask.iter().filter(|&&m| m).count() * cols);
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
        }
    }
    out
}

/// Inverse of `gather_rows`: masked rows come from `x` in order, the rest
/// from `fill`.
pub(crate) fn scatter_rows(x: &[f64], fill: &[f64], cols: usize, mask: &[bool]) -> Vec<f64> {
    let mut out = fill.to_vec();
    let mut src = 0;
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            out[r * cols..(r + 1) * cols].copy_from_slice(&x[src * cols..(src + 1) * cols]);
            src += 1;
        }
    }
    out
}

pub(crate) fn sum(x: &[f64]) -> f64 {
    x.iter().sum()
}

pub(crate) fn square(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v * v).collect()
}

/// Transpose of a rows x cols matrix.
pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Orientation of a vector broadcast into a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastAxis {
    /// Input indexes rows; each value is repeated across its row.
    Rows,
    /// Input indexes columns; the vector is repeated for every row.
    Cols,
}

/// Expand a scalar or vector into a rows x cols matrix.
pub(crate) fn broadcast(x: &[f64], rows: usize, cols: usize, axis: BroadcastAxis) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    if x.len() == 1 {
        out.fill(x[0]);
        return out;
    }
    match axis {
        BroadcastAxis::Rows => {
            for r in 0..rows {
                out[r * cols..(r + 1) * cols].fill(x[r]);
            }
        }
        BroadcastAxis::Cols => {
            for r in 0..rows {
                out[r * cols..(r + 1) * cols].copy_from_slice(x);
            }
        }
    }
    out
}

/// Collapse a broadcast gradient back onto the input: sum over the
/// replicated positions.
pub(crate) fn broadcast_backward(
    dy: &[f64],
    rows: usize,
    cols: usize,
    input_len: usize,
    axis: BroadcastAxis,
) -> Vec<f64> {
    if input_len == 1 {
        return vec![dy.iter().sum()];
    }
    match axis {
        BroadcastAxis::Rows => (0..rows)
            .map(|r| dy[r * cols..(r + 1) * cols].iter().sum())
            .collect(),
        BroadcastAxis::Cols => {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, &d) in out.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                    *o += d;
                }
            }
            out
        }
    }
}

pub(crate) fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub(crate) fn narrow(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}
