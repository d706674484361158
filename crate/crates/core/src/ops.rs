//! Forward and backward kernels for the primitive set.
//!
//! Kernels are pure functions over slices; all shape validation happens in
//! the tape layer before they run. Backward kernels accumulate into
//! caller-provided buffers so gradient fan-in sums naturally.

use crate::scalar::Scalar;

// ── general matrix multiply ─────────────────────────────────────────────────

/// C += A·B with optional transposes. `a` is logically m×k, `b` is k×n
/// (shapes given post-transpose).
pub fn gemm_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    transpose_a: bool,
    transpose_b: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        for p in 0..k {
            let av = if transpose_a { a[p * m + i] } else { a[i * k + p] };
            if av == S::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            if transpose_b {
                for (j, cj) in row.iter_mut().enumerate() {
                    *cj = *cj + av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (cj, bv) in row.iter_mut().zip(brow) {
                    *cj = *cj + av * *bv;
                }
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, transpose_b: bool) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n, false, transpose_b);
    c
}

// ── conv2d ──────────────────────────────────────────────────────────────────

/// Output spatial extent of a zero-padded, strided convolution.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv2d_forward<S: Scalar>(input: &[S], kernel: &[S], d: &Conv2dDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.batch * d.out_channels * d.out_h * d.out_w];
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let ker_plane = d.kernel * d.kernel;
    for n in 0..d.batch {
        let in_base = n * d.in_channels * in_plane;
        for co in 0..d.out_channels {
            let ker_base = co * d.in_channels * ker_plane;
            let out_base = (n * d.out_channels + co) * out_plane;
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let mut acc = S::zero();
                    for ci in 0..d.in_channels {
                        let in_ch = in_base + ci * in_plane;
                        let ker_ch = ker_base + ci * ker_plane;
                        for kh in 0..d.kernel {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_h as isize {
                                continue;
                            }
                            let in_row = in_ch + ih as usize * d.in_w;
                            let ker_row = ker_ch + kh * d.kernel;
                            for kw in 0..d.kernel {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.in_w as isize {
                                    continue;
                                }
                                acc = acc + input[in_row + iw as usize] * kernel[ker_row + kw];
                            }
                        }
                    }
                    out[out_base + oh * d.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients in one sweep over the output grad.
pub fn conv2d_backward<S: Scalar>(
    input: &[S],
    kernel: &[S],
    grad_out: &[S],
    d: &Conv2dDims,
    grad_input: Option<&mut [S]>,
    grad_kernel: Option<&mut [S]>,
) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let ker_plane = d.kernel * d.kernel;
    let mut gi = grad_input;
    let mut gk = grad_kernel;
    for n in 0..d.batch {
        let in_base = n * d.in_channels * in_plane;
        for co in 0..d.out_channels {
            let ker_base = co * d.in_channels * ker_plane;
            let out_base = (n * d.out_channels + co) * out_plane;
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let g = grad_out[out_base + oh * d.out_w + ow];
                    if g == S::zero() {
                        continue;
                    }
                    for ci in 0..d.in_channels {
                        let in_ch = in_base + ci * in_plane;
                        let ker_ch = ker_base + ci * ker_plane;
                        for kh in 0..d.kernel {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_h as isize {
                                continue;
                            }
                            let in_row = in_ch + ih as usize * d.in_w;
                            let ker_row = ker_ch + kh * d.kernel;
                            for kw in 0..d.kernel {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.in_w as isize {
                                    continue;
                                }
                                let ii = in_row + iw as usize;
                                let ki = ker_row + kw;
                                if let Some(gi) = gi.as_deref_mut() {
                                    gi[ii] = gi[ii] + g * kernel[ki];
                                }
                                if let Some(gk) = gk.as_deref_mut() {
                                    gk[ki] = gk[ki] + g * input[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── pointwise and reductions ────────────────────────────────────────────────

pub fn relu_forward<S: Scalar>(x: &[S]) -> (Vec<S>, Vec<bool>) {
    let mut out = Vec::with_capacity(x.len());
    let mut active = Vec::with_capacity(x.len());
    for &v in x {
        // Gradient at exactly 0 is defined as 0, so 0 counts as inactive.
        let on = v > S::zero();
        active.push(on);
        out.push(if on { v } else { S::zero() });
    }
    (out, active)
}

pub fn global_avg_pool_forward<S: Scalar>(x: &[S], batch: usize, channels: usize, plane: usize) -> Vec<S> {
    let inv = S::of(1.0 / plane as f64);
    let mut out = vec![S::zero(); batch * channels];
    for (i, o) in out.iter_mut().enumerate() {
        let base = i * plane;
        let mut acc = S::zero();
        for &v in &x[base..base + plane] {
            acc = acc + v;
        }
        *o = acc * inv;
    }
    out
}

pub fn row_l2_normalize_forward<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Option<(Vec<S>, Vec<S>)> {
    let mut out = vec![S::zero(); x.len()];
    let mut inv_norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut sq = S::zero();
        for &v in row {
            sq = sq + v * v;
        }
        let norm = sq.sqrt();
        let inv = norm.recip();
        if !inv.is_finite() {
            return None; // zero (or denormal-tiny) row cannot be normalized
        }
        inv_norms.push(inv);
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v * inv;
        }
    }
    Some((out, inv_norms))
}

pub fn row_l2_normalize_backward<S: Scalar>(
    normalized: &[S],
    inv_norms: &[S],
    grad_out: &[S],
    rows: usize,
    cols: usize,
    grad_in: &mut [S],
) {
    for r in 0..rows {
        let y = &normalized[r * cols..(r + 1) * cols];
        let gy = &grad_out[r * cols..(r + 1) * cols];
        let mut dot = S::zero();
        for (&yi, &gi) in y.iter().zip(gy) {
            dot = dot + yi * gi;
        }
        let inv = inv_norms[r];
        let gx = &mut grad_in[r * cols..(r + 1) * cols];
        for ((gxi, &yi), &gi) in gx.iter_mut().zip(y).zip(gy) {
            *gxi = *gxi + (gi - dot * yi) * inv;
        }
    }
}

/// Max-shifted row-wise log-softmax.
pub fn log_softmax_forward<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter().skip(1) {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for &v in row {
            sum = sum + (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub fn log_softmax_backward<S: Scalar>(
    output: &[S],
    grad_out: &[S],
    rows: usize,
    cols: usize,
    grad_in: &mut [S],
) {
    for r in 0..rows {
        let y = &output[r * cols..(r + 1) * cols];
        let gy = &grad_out[r * cols..(r + 1) * cols];
        let mut gsum = S::zero();
        for &g in gy {
            gsum = gsum + g;
        }
        let gx = &mut grad_in[r * cols..(r + 1) * cols];
        for ((gxi, &yi), &gi) in gx.iter_mut().zip(y).zip(gy) {
            *gxi = *gxi + gi - yi.exp() * gsum;
        }
    }
}

// ── batch normalization (2-D, per feature column) ───────────────────────────

pub struct BatchNormForward<S> {
    pub output: Vec<S>,
    pub normalized: Vec<S>,
    pub inv_std: Vec<S>,
    /// Updated running statistics; present only in training mode.
    pub update: Option<(Vec<S>, Vec<S>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    rows: usize,
    cols: usize,
    training: bool,
    momentum: f64,
    epsilon: f64,
) -> BatchNormForward<S> {
    let eps = S::of(epsilon);
    let (mean, var) = if training {
        let inv_n = S::of(1.0 / rows as f64);
        let mut mean = vec![S::zero(); cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                *m = *m + v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m * inv_n;
        }
        let mut var = vec![S::zero(); cols];
        for r in 0..rows {
            for ((vv, &v), &m) in var.iter_mut().zip(&x[r * cols..(r + 1) * cols]).zip(&mean) {
                let d = v - m;
                *vv = *vv + d * d;
            }
        }
        for v in var.iter_mut() {
            *v = *v * inv_n;
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut normalized = vec![S::zero(); x.len()];
    let mut output = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let xh = (x[i] - mean[c]) * inv_std[c];
            normalized[i] = xh;
            output[i] = gamma[c] * xh + beta[c];
        }
    }

    let update = if training {
        let mom = S::of(momentum);
        let keep = S::of(1.0 - momentum);
        let new_mean: Vec<S> = running_mean
            .iter()
            .zip(&mean)
            .map(|(&r, &b)| keep * r + mom * b)
            .collect();
        let new_var: Vec<S> = running_var
            .iter()
            .zip(&var)
            .map(|(&r, &b)| keep * r + mom * b)
            .collect();
        Some((new_mean, new_var))
    } else {
        None
    };

    BatchNormForward {
        output,
        normalized,
        inv_std,
        update,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<S: Scalar>(
    normalized: &[S],
    inv_std: &[S],
    gamma: &[S],
    grad_out: &[S],
    rows: usize,
    cols: usize,
    training: bool,
    grad_x: Option<&mut [S]>,
    grad_gamma: Option<&mut [S]>,
    grad_beta: Option<&mut [S]>,
) {
    if let Some(gb) = grad_beta {
        for r in 0..rows {
            for (g, &go) in gb.iter_mut().zip(&grad_out[r * cols..(r + 1) * cols]) {
                *g = *g + go;
            }
        }
    }
    if let Some(gg) = grad_gamma {
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                gg[c] = gg[c] + grad_out[i] * normalized[i];
            }
        }
    }
    let Some(gx) = grad_x else { return };
    if training {
        // Batch statistics participate in the graph:
        // dx = inv_std/n * (n*dxh - sum(dxh) - xh * sum(dxh*xh))
        let n = S::of(rows as f64);
        let inv_n = S::of(1.0 / rows as f64);
        let mut sum_dxh = vec![S::zero(); cols];
        let mut sum_dxh_xh = vec![S::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let dxh = grad_out[i] * gamma[c];
                sum_dxh[c] = sum_dxh[c] + dxh;
                sum_dxh_xh[c] = sum_dxh_xh[c] + dxh * normalized[i];
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let dxh = grad_out[i] * gamma[c];
                gx[i] = gx[i] + inv_std[c] * inv_n * (n * dxh - sum_dxh[c] - normalized[i] * sum_dxh_xh[c]);
            }
        }
    } else {
        // Running statistics are constants: a pure affine map.
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                gx[i] = gx[i] + grad_out[i] * gamma[c] * inv_std[c];
            }
        }
    }
}
