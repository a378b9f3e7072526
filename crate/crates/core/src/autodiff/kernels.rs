//! Shared numeric kernels: GEMM variants, im2col, row softmax.
//!
//! The three GEMM flavors below cover every matrix product the engine needs
//! (forward, input gradient, weight gradient) while keeping the innermost
//! loop contiguous so the autovectorizer can do its job.

use alloc::vec;
use alloc::vec::Vec;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T` (rows of `a` dotted with rows of `b`).
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            c_row[j] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]` (columns of `a` against rows of `b`).
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// Output spatial size of a convolution, if positive.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds `x[n0, c, h, w]` into patch rows of length `c*k*k`, one row per
/// output pixel, ordered `(n, oh, ow)`. Zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    n0: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let row_len = c * k * k;
    let mut cols = vec![0.0; n0 * oh * ow * row_len];
    for img in 0..n0 {
        let x_img = &x[img * c * h * w..(img + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[((img * oh + oy) * ow + ox) * row_len..][..row_len];
                let base_y = (oy * stride) as isize - padding as isize;
                let base_x = (ox * stride) as isize - padding as isize;
                for ch in 0..c {
                    let x_ch = &x_img[ch * h * w..(ch + 1) * h * w];
                    for ky in 0..k {
                        let sy = base_y + ky as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = base_x + kx as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            row[(ch * k + ky) * k + kx] = x_ch[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch rows back onto the input layout (adjoint of
/// [`im2col`]).
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[f64],
    dx: &mut [f64],
    n0: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let row_len = c * k * k;
    for img in 0..n0 {
        let dx_img = &mut dx[img * c * h * w..(img + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[((img * oh + oy) * ow + ox) * row_len..][..row_len];
                let base_y = (oy * stride) as isize - padding as isize;
                let base_x = (ox * stride) as isize - padding as isize;
                for ch in 0..c {
                    let dx_ch = &mut dx_img[ch * h * w..(ch + 1) * h * w];
                    for ky in 0..k {
                        let sy = base_y + ky as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = base_x + kx as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx_ch[sy as usize * w + sx as usize] += row[(ch * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Writes `softmax(row)` into `out` using max subtraction.
pub fn row_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = libm::exp(v - max);
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Writes `log_softmax(row)` into `out`.
pub fn row_log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += libm::exp(v - max);
    }
    let log_z = max + libm::log(sum);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - log_z;
    }
}
