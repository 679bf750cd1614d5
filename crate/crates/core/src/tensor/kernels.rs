//! Dense numeric kernels shared by the autograd graph and the inference path.
//!
//! All matrices are row-major `f64` slices. Matrix products go through
//! `matrixmultiply::dgemm`, which takes arbitrary strides, so transposed
//! operands never need to be materialized.

use std::cell::Cell;

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Starts counting multiply-accumulates issued by [`gemm`] on this thread.
pub fn start_mac_count() {
    MAC_COUNTER.with(|c| c.set(Some(0)));
}

/// Stops counting and returns the number of multiply-accumulates since
/// [`start_mac_count`]. Returns 0 when counting was not active.
pub fn stop_mac_count() -> u64 {
    MAC_COUNTER.with(|c| c.replace(None).unwrap_or(0))
}

/// Adds to the active multiply-accumulate count (no-op when inactive).
#[inline]
pub fn count_macs(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored as `m x k` (or `k x m` when `trans_a`), `b` as `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    count_macs((m * k * n) as u64);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Returns `op(a) * op(b)` as a fresh `m x n` buffer.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, trans_a, b, trans_b, 0.0, &mut out);
    out
}

pub fn softmax_row(row: &mut [f64]) {
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

pub fn log_softmax_row(row: &mut [f64]) {
    let lse = logsumexp(row);
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer-normalizes each row of `x` in place. Returns per-row `(mean, rstd)`.
pub fn layer_norm_rows(x: &mut [f64], width: usize, gain: &[f64], bias: &[f64]) -> Vec<(f64, f64)> {
    let mut stats = Vec::with_capacity(x.len() / width);
    for row in x.chunks_mut(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    stats
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}
