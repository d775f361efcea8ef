//! Numeric kernels for the decoder network.
//!
//! Every kernel is bit-deterministic for a given input regardless of thread
//! count: parallelism only ever splits over output elements, and the
//! accumulation order within each output element is fixed. Reductions over
//! the batch (conv/linear weight gradients, batchnorm statistics) always
//! walk samples in index order.
//!
//! Convolutions are fixed at 3x3, stride 1, zero padding 1. Pooling is
//! fixed at 2x2, stride 2. That is all the decoder needs, and the fixed
//! geometry keeps the im2col layout simple.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

// ── Matrix multiplication ───────────────────────────────────────────────

/// Work size below which the row-parallel split is not worth the overhead.
const PAR_THRESHOLD: usize = 1 << 15;

/// Fixed-order 8-lane dot product. The explicit lanes let the compiler
/// vectorize while keeping one well-defined summation order.
#[inline]
fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 8;
    let mut acc = [T::zero(); 8];
    for i in 0..chunks {
        let a8 = &a[i * 8..i * 8 + 8];
        let b8 = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += a8[l] * b8[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

fn row_parallel<T, F>(out: &mut [T], n: usize, work: usize, f: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            f(i, row);
        }
    }
}

/// a (m x k) * b (k x n), both row-major.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    row_parallel(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let coef = a[i * k + p];
            if coef == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    });
    out
}

/// a (m x k) * b^T where b is (n x k): rows of a against rows of b.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    row_parallel(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot8(arow, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// a^T * b where a is (k x m) and b is (k x n): output (m x n).
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    row_parallel(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let coef = a[p * m + i];
            if coef == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    });
    out
}

// ── Convolution (3x3, stride 1, pad 1) ──────────────────────────────────

/// im2col for one sample: input (C, H, W) -> matrix (C*9, H*W), where row
/// c*9 + kr*3 + kc holds the input value under kernel tap (kr, kc).
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    debug_assert_eq!(cols.len(), c * 9 * h * w);
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for kr in 0..3usize {
            for kc in 0..3usize {
                let row = &mut cols[(ch * 9 + kr * 3 + kc) * hw..(ch * 9 + kr * 3 + kc + 1) * hw];
                for r in 0..h {
                    let ir = r as isize + kr as isize - 1;
                    let dst = &mut row[r * w..(r + 1) * w];
                    if ir < 0 || ir >= h as isize {
                        for d in dst.iter_mut() {
                            *d = T::zero();
                        }
                        continue;
                    }
                    let src = &plane[ir as usize * w..(ir as usize + 1) * w];
                    match kc {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the im2col gradient back onto the input layout.
fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, x_grad: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x_grad[ch * hw..(ch + 1) * hw];
        for kr in 0..3usize {
            for kc in 0..3usize {
                let row = &cols[(ch * 9 + kr * 3 + kc) * hw..(ch * 9 + kr * 3 + kc + 1) * hw];
                for r in 0..h {
                    let ir = r as isize + kr as isize - 1;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    let src = &row[r * w..(r + 1) * w];
                    let dst = &mut plane[ir as usize * w..(ir as usize + 1) * w];
                    match kc {
                        0 => {
                            for i in 1..w {
                                dst[i - 1] += src[i];
                            }
                        }
                        1 => {
                            for i in 0..w {
                                dst[i] += src[i];
                            }
                        }
                        _ => {
                            for i in 0..w - 1 {
                                dst[i + 1] += src[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

// serial matmuls used inside the per-sample parallel loops
fn matmul_nn_serial<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        for p in 0..k {
            let coef = a[i * k + p];
            if coef == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    }
    out
}

fn matmul_nt_serial<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot8(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

fn matmul_tn_serial<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        for p in 0..k {
            let coef = a[p * m + i];
            if coef == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    }
    out
}

/// x (N, C, H, W) conv w (F, C, 3, 3) plus bias, zero pad 1, stride 1.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, wd] = dims4(x, "conv input")?;
    let [f, wc, kh, kw] = dims4(w, "conv weight")?;
    if wc != c || kh != 3 || kw != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {:?} does not match input channels {c} (kernel must be 3x3)",
            w.shape
        )));
    }
    if b.data.len() != f {
        return Err(Error::ShapeMismatch(format!(
            "conv bias has {} entries, expected {f}",
            b.data.len()
        )));
    }
    let hw = h * wd;
    let mut out = Tensor::zeros(&[n, f, h, wd]);
    out.data
        .par_chunks_mut(f * hw)
        .enumerate()
        .for_each(|(s, out_s)| {
            let mut cols = vec![T::zero(); c * 9 * hw];
            im2col(&x.data[s * c * hw..(s + 1) * c * hw], c, h, wd, &mut cols);
            let y = matmul_nn_serial(&w.data, &cols, f, c * 9, hw);
            for fi in 0..f {
                let bias = b.data[fi];
                for (o, &v) in out_s[fi * hw..(fi + 1) * hw].iter_mut().zip(&y[fi * hw..]) {
                    *o = v + bias;
                }
            }
        });
    Ok(out)
}

/// Gradients of `conv2d_forward`: returns (dx, dw, db).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, wd] = dims4(x, "conv input")?;
    let [f, _, _, _] = dims4(w, "conv weight")?;
    let hw = h * wd;
    let mut dx = Tensor::zeros(&x.shape);

    // dx: parallel over samples, each independent
    dx.data
        .par_chunks_mut(c * hw)
        .enumerate()
        .for_each(|(s, dx_s)| {
            let dy_s = &dy.data[s * f * hw..(s + 1) * f * hw];
            let dcols = matmul_tn_serial(&w.data, dy_s, f, c * 9, hw);
            col2im_add(&dcols, c, h, wd, dx_s);
        });

    // dw, db: per-sample pieces combined in sample index order
    let pieces: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut cols = vec![T::zero(); c * 9 * hw];
            im2col(&x.data[s * c * hw..(s + 1) * c * hw], c, h, wd, &mut cols);
            let dy_s = &dy.data[s * f * hw..(s + 1) * f * hw];
            let dw_s = matmul_nt_serial(dy_s, &cols, f, hw, c * 9);
            let mut db_s = vec![T::zero(); f];
            for fi in 0..f {
                let mut acc = T::zero();
                for &v in &dy_s[fi * hw..(fi + 1) * hw] {
                    acc += v;
                }
                db_s[fi] = acc;
            }
            (dw_s, db_s)
        })
        .collect();
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[f]);
    for (dw_s, db_s) in pieces {
        for (o, v) in dw.data.iter_mut().zip(dw_s) {
            *o += v;
        }
        for (o, v) in db.data.iter_mut().zip(db_s) {
            *o += v;
        }
    }
    Ok((dx, dw, db))
}

// ── Batch normalization ─────────────────────────────────────────────────

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel state saved by the training-mode forward pass for backward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    /// Normalized activations, same shape as the input.
    pub xhat: Vec<T>,
    /// 1 / sqrt(var + eps) per channel.
    pub inv_std: Vec<T>,
}

/// Normalize over (N, spatial) per channel. The input is interpreted as
/// (N, C, S) row-major; S = H*W for feature maps, S = 1 for vectors.
/// Training mode uses batch statistics (population variance) and folds them
/// into the running estimates with momentum `BN_MOMENTUM`; eval mode uses
/// the running estimates unchanged.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    channels: usize,
    spatial: usize,
    training: bool,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let numel = x.data.len();
    if numel == 0 || !numel.is_multiple_of(channels * spatial) {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm input of {numel} elements is not divisible into ({channels} channels x {spatial} spatial)"
        )));
    }
    let n = numel / (channels * spatial);
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.data.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm {name} has {} entries, expected {channels}",
                t.data.len()
            )));
        }
    }
    let m = T::from_f64((n * spatial) as f64);
    let eps = T::from_f64(BN_EPS);
    let mut y = Tensor::zeros(&x.shape);
    let mut cache = if training {
        Some(BatchNormCache {
            xhat: vec![T::zero(); numel],
            inv_std: vec![T::zero(); channels],
        })
    } else {
        None
    };

    // Each channel's slices are strided; compute per channel, parallel over
    // channels, sample index order inside.
    let stats: Vec<(T, T)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            if training {
                let mut sum = T::zero();
                for s in 0..n {
                    let base = (s * channels + c) * spatial;
                    for i in 0..spatial {
                        sum += x.data[base + i];
                    }
                }
                let mean = sum / m;
                let mut var_acc = T::zero();
                for s in 0..n {
                    let base = (s * channels + c) * spatial;
                    for i in 0..spatial {
                        let d = x.data[base + i] - mean;
                        var_acc += d * d;
                    }
                }
                (mean, var_acc / m)
            } else {
                (running_mean.data[c], running_var.data[c])
            }
        })
        .collect();

    if training {
        let mom = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - mom;
        for (c, &(mean, var)) in stats.iter().enumerate() {
            running_mean.data[c] = keep * running_mean.data[c] + mom * mean;
            running_var.data[c] = keep * running_var.data[c] + mom * var;
        }
    }

    // write normalized output (parallel over samples; channels inner)
    let inv_stds: Vec<T> = stats.iter().map(|&(_, v)| T::one() / (v + eps).sqrt()).collect();
    y.data
        .par_chunks_mut(channels * spatial)
        .enumerate()
        .for_each(|(s, y_s)| {
            for c in 0..channels {
                let (mean, _) = stats[c];
                let inv = inv_stds[c];
                let g = gamma.data[c];
                let b = beta.data[c];
                let x_s = &x.data[(s * channels + c) * spatial..(s * channels + c + 1) * spatial];
                for (o, &v) in y_s[c * spatial..(c + 1) * spatial].iter_mut().zip(x_s) {
                    *o = g * ((v - mean) * inv) + b;
                }
            }
        });
    if let Some(cache) = cache.as_mut() {
        cache.inv_std.copy_from_slice(&inv_stds);
        cache
            .xhat
            .par_chunks_mut(channels * spatial)
            .enumerate()
            .for_each(|(s, xh_s)| {
                for c in 0..channels {
                    let (mean, _) = stats[c];
                    let inv = inv_stds[c];
                    let x_s =
                        &x.data[(s * channels + c) * spatial..(s * channels + c + 1) * spatial];
                    for (o, &v) in xh_s[c * spatial..(c + 1) * spatial].iter_mut().zip(x_s) {
                        *o = (v - mean) * inv;
                    }
                }
            });
    }
    Ok((y, cache))
}

/// Gradients for training-mode batchnorm: returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
    channels: usize,
    spatial: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let numel = dy.data.len();
    let n = numel / (channels * spatial);
    let m = T::from_f64((n * spatial) as f64);
    let mut dx = Tensor::zeros(&dy.shape);
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);

    let sums: Vec<(T, T)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut s_dy = T::zero();
            let mut s_dy_xhat = T::zero();
            for s in 0..n {
                let base = (s * channels + c) * spatial;
                for i in 0..spatial {
                    let g = dy.data[base + i];
                    s_dy += g;
                    s_dy_xhat += g * cache.xhat[base + i];
                }
            }
            (s_dy, s_dy_xhat)
        })
        .collect();
    for (c, &(s_dy, s_dy_xhat)) in sums.iter().enumerate() {
        dbeta.data[c] = s_dy;
        dgamma.data[c] = s_dy_xhat;
    }
    dx.data
        .par_chunks_mut(channels * spatial)
        .enumerate()
        .for_each(|(s, dx_s)| {
            for c in 0..channels {
                let (s_dy, s_dy_xhat) = sums[c];
                let coef = gamma.data[c] * cache.inv_std[c] / m;
                let base = (s * channels + c) * spatial;
                for i in 0..spatial {
                    let g = dy.data[base + i];
                    dx_s[c * spatial + i] =
                        coef * (m * g - s_dy - cache.xhat[base + i] * s_dy_xhat);
                }
            }
        });
    (dx, dgamma, dbeta)
}

// ── Elementwise and pooling ─────────────────────────────────────────────

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    }
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan
/// order (0,0), (0,1), (1,0), (1,1); the winning flat input index is saved
/// for backward.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = dims4(x, "maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let plane_out = oh * ow;
    out.data
        .par_chunks_mut(plane_out)
        .zip(argmax.par_chunks_mut(plane_out))
        .enumerate()
        .for_each(|(plane_idx, (o_plane, a_plane))| {
            let in_base = plane_idx * h * w;
            for r in 0..oh {
                for cc in 0..ow {
                    let i00 = in_base + (2 * r) * w + 2 * cc;
                    let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = candidates[0];
                    let mut best_v = x.data[best];
                    for &idx in &candidates[1..] {
                        if x.data[idx] > best_v {
                            best_v = x.data[idx];
                            best = idx;
                        }
                    }
                    o_plane[r * ow + cc] = best_v;
                    a_plane[r * ow + cc] = best as u32;
                }
            }
        });
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>, argmax: &[u32]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (&g, &idx) in dy.data.iter().zip(argmax) {
        dx.data[idx as usize] += g;
    }
    dx
}

pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape[0];
    let rest: usize = x.shape[1..].iter().product();
    Tensor {
        shape: vec![n, rest],
        data: x.data.clone(),
    }
}

// ── Linear ──────────────────────────────────────────────────────────────

/// x (N, D) * w^T (D, O) + b, with w stored (O, D).
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = dims2(x, "linear input")?;
    let (o, wd) = dims2(w, "linear weight")?;
    if wd != d || b.data.len() != o {
        return Err(Error::ShapeMismatch(format!(
            "linear shapes disagree: x {:?}, w {:?}, b {:?}",
            x.shape, w.shape, b.shape
        )));
    }
    let mut y = matmul_nt(&x.data, &w.data, n, d, o);
    for row in y.chunks_mut(o) {
        for (v, &bias) in row.iter_mut().zip(&b.data) {
            *v += bias;
        }
    }
    Tensor::from_vec(&[n, o], y)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    let dx = matmul_nn(&dy.data, &w.data, n, o, d);
    let dw = matmul_tn(&dy.data, &x.data, n, o, d);
    let mut db = vec![T::zero(); o];
    for row in dy.data.chunks(o) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (
        Tensor { shape: vec![n, d], data: dx },
        Tensor { shape: vec![o, d], data: dw },
        Tensor { shape: vec![o], data: db },
    )
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Mean cross-entropy over the batch after a numerically stable softmax.
/// Returns the scalar loss and the softmax probabilities (kept for the
/// backward pass).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = dims2(logits, "logits")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = Tensor::zeros(&[n, k]);
    let mut loss = T::zero();
    for (i, row) in logits.data.chunks(k).enumerate() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        let prow = &mut probs.data[i * k..(i + 1) * k];
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        for p in prow.iter_mut() {
            *p /= z;
        }
        loss -= prow[labels[i]].ln();
    }
    Ok((loss / T::from_f64(n as f64), probs))
}

/// d(loss)/d(logits) = (probs - onehot) / N, scaled by upstream dLoss.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    dloss: T,
) -> Tensor<T> {
    let (n, k) = (probs.shape[0], probs.shape[1]);
    let inv_n = dloss / T::from_f64(n as f64);
    let mut dx = probs.clone();
    for (i, row) in dx.data.chunks_mut(k).enumerate() {
        row[labels[i]] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    dx
}

/// Mean squared error over all elements of two same-shape tensors.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch(format!(
            "mse shapes {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let n = T::from_f64(pred.data.len() as f64);
    let mut acc = T::zero();
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let d = p - t;
        acc += d * d;
    }
    Ok(acc / n)
}

pub fn mse_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, dloss: T) -> Tensor<T> {
    let scale = dloss * T::from_f64(2.0 / pred.data.len() as f64);
    Tensor {
        shape: pred.shape.clone(),
        data: pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| scale * (p - t))
            .collect(),
    }
}

// ── Shape helpers ───────────────────────────────────────────────────────

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match t.shape[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} must be rank 4, got {:?}",
            t.shape
        ))),
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} must be rank 2, got {:?}",
            t.shape
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::rng_for(seed, "ops-test", 0);
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        // odd sizes exercise the dot8 tail path
        let (m, k, n) = (5, 13, 7);
        let a = rand_vec(m * k, 1);
        let b = rand_vec(k * n, 2);
        let expect = naive_matmul(&a, &b, m, k, n);
        let nn = matmul_nn(&a, &b, m, k, n);
        for (x, y) in nn.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // nt: feed b transposed
        let mut bt = vec![0.0; k * n];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let nt = matmul_nt(&a, &bt, m, k, n);
        for (x, y) in nt.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // tn: feed a transposed
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let tn = matmul_tn(&at, &b, k, m, n);
        for (x, y) in tn.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_thread_count_invariant() {
        let (m, k, n) = (64, 96, 80); // above the parallel threshold
        let a: Vec<f32> = rand_vec(m * k, 3).iter().map(|&v| v as f32).collect();
        let b: Vec<f32> = rand_vec(k * n, 4).iter().map(|&v| v as f32).collect();
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let r1 = pool1.install(|| matmul_nn(&a, &b, m, k, n));
        let r4 = pool4.install(|| matmul_nn(&a, &b, m, k, n));
        let bits1: Vec<u32> = r1.iter().map(|v| v.to_bits()).collect();
        let bits4: Vec<u32> = r4.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits4);
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], rand_vec(16, 5)).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data[4] = 1.0; // centre tap
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape, x.shape);
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_ones_kernel_counts_neighbourhood() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 5, 5], vec![1.0; 25]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        let at = |r: usize, c: usize| y.data[r * 5 + c];
        assert_eq!(at(0, 0), 4.0);
        assert_eq!(at(0, 4), 4.0);
        assert_eq!(at(4, 0), 4.0);
        assert_eq!(at(4, 4), 4.0);
        assert_eq!(at(0, 2), 6.0);
        assert_eq!(at(2, 0), 6.0);
        assert_eq!(at(2, 2), 9.0);
    }

    #[test]
    fn conv_multichannel_matches_direct_convolution() {
        let (n, c, f, h, w) = (2, 3, 4, 6, 5);
        let x = Tensor::from_vec(&[n, c, h, w], rand_vec(n * c * h * w, 6)).unwrap();
        let wt = Tensor::from_vec(&[f, c, 3, 3], rand_vec(f * c * 9, 7)).unwrap();
        let b = Tensor::from_vec(&[f], rand_vec(f, 8)).unwrap();
        let y = conv2d_forward(&x, &wt, &b).unwrap();
        // direct quadruple loop
        for s in 0..n {
            for fi in 0..f {
                for r in 0..h {
                    for cc in 0..w {
                        let mut acc = b.data[fi];
                        for ch in 0..c {
                            for kr in 0..3isize {
                                for kc in 0..3isize {
                                    let ir = r as isize + kr - 1;
                                    let ic = cc as isize + kc - 1;
                                    if ir < 0 || ir >= h as isize || ic < 0 || ic >= w as isize {
                                        continue;
                                    }
                                    acc += x.data
                                        [((s * c + ch) * h + ir as usize) * w + ic as usize]
                                        * wt.data[((fi * c + ch) * 3 + kr as usize) * 3
                                            + kc as usize];
                                }
                            }
                        }
                        let got = y.data[((s * f + fi) * h + r) * w + cc];
                        assert!((got - acc).abs() < 1e-12, "({s},{fi},{r},{cc})");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let (n, c, f, h, w) = (1, 2, 2, 4, 4);
        let x = Tensor::from_vec(&[n, c, h, w], rand_vec(n * c * h * w, 9)).unwrap();
        let wt = Tensor::from_vec(&[f, c, 3, 3], rand_vec(f * c * 9, 10)).unwrap();
        let b = Tensor::from_vec(&[f], rand_vec(f, 11)).unwrap();
        // loss = sum(conv(x))
        let dy = Tensor::from_vec(&[n, f, h, w], vec![1.0; n * f * h * w]).unwrap();
        let (dx, dw, db) = conv2d_backward(&x, &wt, &dy).unwrap();
        let loss = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv2d_forward(x, wt, b).unwrap().data.iter().sum()
        };
        let h_step = 1e-6;
        for i in [0usize, 7, 15, 31] {
            let mut xp = x.clone();
            xp.data[i] += h_step;
            let mut xm = x.clone();
            xm.data[i] -= h_step;
            let fd = (loss(&xp, &wt, &b) - loss(&xm, &wt, &b)) / (2.0 * h_step);
            assert!((fd - dx.data[i]).abs() < 1e-5, "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        for i in [0usize, 9, 17] {
            let mut wp = wt.clone();
            wp.data[i] += h_step;
            let mut wm = wt.clone();
            wm.data[i] -= h_step;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h_step);
            assert!((fd - dw.data[i]).abs() < 1e-5, "dw[{i}]: {fd} vs {}", dw.data[i]);
        }
        for i in 0..f {
            let mut bp = b.clone();
            bp.data[i] += h_step;
            let mut bm = b.clone();
            bm.data[i] -= h_step;
            let fd = (loss(&x, &wt, &bp) - loss(&x, &wt, &bm)) / (2.0 * h_step);
            assert!((fd - db.data[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_constant_input_gives_zero_output() {
        let x = Tensor::<f64>::from_vec(&[3, 2, 4], vec![5.0; 24]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::zeros(&[2]);
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, 2, 4, true).unwrap();
        for &v in &y.data {
            assert!(v.abs() < 1e-10);
        }
        // running stats moved toward (5, 0) by one momentum step
        assert!((rm.data[0] - 0.5).abs() < 1e-12);
        assert!((rv.data[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_each_channel() {
        let x = Tensor::from_vec(&[4, 3, 5], rand_vec(60, 12)).unwrap();
        let gamma = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        let beta = Tensor::zeros(&[3]);
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        let (y, _) = batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, 3, 5, true).unwrap();
        for c in 0..3 {
            let mut vals = Vec::new();
            for s in 0..4 {
                let base = (s * 3 + c) * 5;
                vals.extend_from_slice(&y.data[base..base + 5]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3, "eps shifts variance slightly: {var}");
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let mut rm = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let mut rv = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        let (y, cache) =
            batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, 1, 2, false).unwrap();
        assert!(cache.is_none());
        assert_eq!(rm.data[0], 2.0, "eval must not touch running stats");
        for (i, &v) in x.data.iter().enumerate() {
            let expect = 2.0 * (v - 2.0) / (4.0f64 + BN_EPS).sqrt() + 0.5;
            assert!((y.data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let x = Tensor::from_vec(&[3, 2, 4], rand_vec(24, 13)).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.3, 0.8]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        // weighted sum keeps the loss sensitive to every element
        let weights = rand_vec(24, 14);
        let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let mut rm = Tensor::zeros(&[2]);
            let mut rv = Tensor::from_vec(&[2], vec![1.0; 2]).unwrap();
            let (y, _) = batchnorm_forward(x, g, b, &mut rm, &mut rv, 2, 4, true).unwrap();
            y.data.iter().zip(&weights).map(|(a, w)| a * w).sum()
        };
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::from_vec(&[2], vec![1.0; 2]).unwrap();
        let (_, cache) = batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, 2, 4, true).unwrap();
        let dy = Tensor::from_vec(&[3, 2, 4], weights.clone()).unwrap();
        let (dx, dgamma, dbeta) = batchnorm_backward(&dy, &gamma, cache.as_ref().unwrap(), 2, 4);
        let hstep = 1e-6;
        for i in 0..24 {
            let mut xp = x.clone();
            xp.data[i] += hstep;
            let mut xm = x.clone();
            xm.data[i] -= hstep;
            let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * hstep);
            assert!((fd - dx.data[i]).abs() < 1e-4, "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        for c in 0..2 {
            let mut gp = gamma.clone();
            gp.data[c] += hstep;
            let mut gm = gamma.clone();
            gm.data[c] -= hstep;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * hstep);
            assert!((fd - dgamma.data[c]).abs() < 1e-5);
            let mut bp = beta.clone();
            bp.data[c] += hstep;
            let mut bm = beta.clone();
            bm.data[c] -= hstep;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * hstep);
            assert!((fd - dbeta.data[c]).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_clamps_and_gates() {
        let x = Tensor::from_vec(&[1, 4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data, vec![0.0, 0.0, 2.0, 0.0]);
        let dy = Tensor::from_vec(&[1, 4], vec![1.0; 4]).unwrap();
        let dx = relu_backward(&x, &dy);
        assert_eq!(dx.data, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_picks_max_and_first_on_ties() {
        let x = Tensor::from_vec(
            &[1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 5.0, //
                3.0, 1.0, 5.0, 5.0, //
                7.0, 7.0, 0.0, 1.0, //
                7.0, 7.0, 2.0, 0.0,
            ],
        )
        .unwrap();
        let (y, argmax) = maxpool_forward(&x).unwrap();
        assert_eq!(y.shape, vec![1, 1, 2, 2]);
        assert_eq!(y.data, vec![3.0, 5.0, 7.0, 2.0]);
        // the all-5 window ties; first in scan order is (0, 2) = flat 2
        assert_eq!(argmax[1], 2);
        // the all-7 window ties; first is (2, 0) = flat 8
        assert_eq!(argmax[2], 8);
        let dy = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let dx = maxpool_backward(&[1, 1, 4, 4], &dy, &argmax);
        assert_eq!(dx.data[2], 1.0);
        assert_eq!(dx.data[3], 0.0);
        assert_eq!(dx.data[8], 1.0);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool_forward(&x).is_err());
    }

    #[test]
    fn linear_known_case_and_gradients() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data, vec![1.1, 2.2, 3.3]);
        let dy = Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let (dx, dw, db) = linear_backward(&x, &w, &dy);
        assert_eq!(dx.data, vec![2.0, 2.0]); // column sums of w
        assert_eq!(dw.data, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(db.data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits_is_log_k() {
        let logits = Tensor::<f64>::zeros(&[4, 9]);
        let labels = vec![0usize, 3, 5, 8];
        let (loss, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((loss - 2.1972245773362196).abs() < 1e-12, "{loss}");
        for row in probs.data.chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_backward_matches_finite_differences() {
        let logits = Tensor::from_vec(&[3, 4], rand_vec(12, 15)).unwrap();
        let labels = vec![2usize, 0, 3];
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        let dx = softmax_cross_entropy_backward(&probs, &labels, 1.0);
        let hstep = 1e-6;
        for i in 0..12 {
            let mut lp = logits.clone();
            lp.data[i] += hstep;
            let mut lm = logits.clone();
            lm.data[i] -= hstep;
            let fp = softmax_cross_entropy(&lp, &labels).unwrap().0;
            let fm = softmax_cross_entropy(&lm, &labels).unwrap().0;
            let fd = (fp - fm) / (2.0 * hstep);
            assert!((fd - dx.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_ce_rejects_bad_labels() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mse_known_value_and_gradient() {
        let p = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        let t = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap();
        let loss = mse(&p, &t).unwrap();
        assert!((loss - 2.5f64).abs() < 1e-15); // (1 + 4) / 2
        let g = mse_backward(&p, &t, 1.0);
        assert_eq!(g.data, vec![1.0, 2.0]);
        let bad = Tensor::<f64>::zeros(&[3, 1]);
        assert!(mse(&p, &bad).is_err());
    }
}
