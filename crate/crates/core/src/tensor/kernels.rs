//! Forward and backward kernels on plain tensors. The tape in `tape.rs`
//! records which of these ran; nothing here knows about gradients flowing
//! between ops.
//!
//! Convolutions lower to im2col + GEMM per batch item. Batch items run in
//! parallel; per-item weight gradients are reduced in batch order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::{Shape4, Tensor4, TensorError};
use crate::Scalar;

/// Geometry shared by `conv2d` and `conv_transpose2d`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub output_padding: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            output_padding: 0,
        }
    }

    pub const fn transposed(stride: usize, padding: usize, output_padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
            output_padding,
        }
    }

    fn validate(&self) -> Result<(), TensorError> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(TensorError::Config(format!(
                "stride and dilation must be >= 1, got stride {} dilation {}",
                self.stride, self.dilation
            )));
        }
        Ok(())
    }

    /// Output extent of a forward convolution along one axis.
    pub fn conv_out(&self, input: usize, kernel: usize) -> Result<usize, TensorError> {
        self.validate()?;
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(TensorError::Config(format!(
                "kernel span {span} exceeds padded input {padded}"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn conv_transpose_out(&self, input: usize, kernel: usize) -> Result<usize, TensorError> {
        self.validate()?;
        if self.output_padding >= self.stride {
            return Err(TensorError::Config(format!(
                "output_padding {} must be smaller than stride {}",
                self.output_padding, self.stride
            )));
        }
        let full = (input - 1) * self.stride + self.dilation * (kernel - 1) + 1 + self.output_padding;
        if full <= 2 * self.padding {
            return Err(TensorError::Config(format!(
                "non-positive transposed conv output for input {input}"
            )));
        }
        Ok(full - 2 * self.padding)
    }
}

struct Patch {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

impl Patch {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every (column-matrix index, image index) pair that lies inside
    /// the unpadded image.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let g = self.geom;
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.oh {
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base_img = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * p + oy * self.ow + ox, base_img + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each(|ci, ii| cols[ci] = img[ii]);
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        self.for_each(|ci, ii| img[ii] += cols[ci]);
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(m, k, n, a, &bt, c);
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    acc
}

pub fn conv2d<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, geom: ConvGeom) -> Result<Tensor4<T>, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c != xs.c {
        return Err(TensorError::Shape(format!(
            "conv2d: input has {} channels, kernel {} expects {}",
            xs.c, ws, ws.c
        )));
    }
    let oh = geom.conv_out(xs.h, ws.h)?;
    let ow = geom.conv_out(xs.w, ws.w)?;
    let patch = Patch { c: xs.c, h: xs.h, w: xs.w, kh: ws.h, kw: ws.w, oh, ow, geom };
    let out_shape = Shape4::new(xs.n, ws.n, oh, ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_len = xs.c * xs.plane();
    let out_len = ws.n * oh * ow;
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, o)| {
        let mut cols = vec![T::zero(); patch.rows() * patch.cols()];
        patch.im2col(&x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        gemm_nn(ws.n, patch.rows(), patch.cols(), w.data(), &cols, o);
    });
    Tensor4::from_vec(out_shape, out)
}

/// Gradients of `conv2d` with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    geom: ConvGeom,
) -> (Tensor4<T>, Tensor4<T>) {
    let xs = x.shape();
    let ws = w.shape();
    let ys = dy.shape();
    let patch = Patch { c: xs.c, h: xs.h, w: xs.w, kh: ws.h, kw: ws.w, oh: ys.h, ow: ys.w, geom };
    let in_len = xs.c * xs.plane();
    let out_len = ys.c * ys.plane();
    let (k, p) = (patch.rows(), patch.cols());
    let mut dx = vec![T::zero(); xs.numel()];
    let dw_parts: Vec<Vec<T>> = dx
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(b, dxb)| {
            let dyb = &dy.data()[b * out_len..(b + 1) * out_len];
            let mut cols = vec![T::zero(); k * p];
            patch.im2col(&x.data()[b * in_len..(b + 1) * in_len], &mut cols);
            let mut dwb = vec![T::zero(); ws.numel()];
            gemm_nt(ws.n, p, k, dyb, &cols, &mut dwb);
            let mut dcols = vec![T::zero(); k * p];
            gemm_tn(k, ws.n, p, w.data(), dyb, &mut dcols);
            patch.col2im(&dcols, dxb);
            dwb
        })
        .collect();
    let dw = sum_in_order(dw_parts, ws.numel());
    (
        Tensor4::from_vec(xs, dx).unwrap(),
        Tensor4::from_vec(ws, dw).unwrap(),
    )
}

/// Transposed convolution; kernel layout is `(c_in, c_out, kh, kw)`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: ConvGeom,
) -> Result<Tensor4<T>, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.n != xs.c {
        return Err(TensorError::Shape(format!(
            "conv_transpose2d: input has {} channels, kernel {} expects {}",
            xs.c, ws, ws.n
        )));
    }
    let oh = geom.conv_transpose_out(xs.h, ws.h)?;
    let ow = geom.conv_transpose_out(xs.w, ws.w)?;
    let patch = Patch { c: ws.c, h: oh, w: ow, kh: ws.h, kw: ws.w, oh: xs.h, ow: xs.w, geom };
    let out_shape = Shape4::new(xs.n, ws.c, oh, ow);
    let in_len = xs.c * xs.plane();
    let out_len = ws.c * oh * ow;
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, o)| {
        let mut cols = vec![T::zero(); patch.rows() * patch.cols()];
        gemm_tn(patch.rows(), xs.c, patch.cols(), w.data(), &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        patch.col2im(&cols, o);
    });
    Tensor4::from_vec(out_shape, out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    geom: ConvGeom,
) -> (Tensor4<T>, Tensor4<T>) {
    let xs = x.shape();
    let ws = w.shape();
    let ys = dy.shape();
    let patch = Patch { c: ws.c, h: ys.h, w: ys.w, kh: ws.h, kw: ws.w, oh: xs.h, ow: xs.w, geom };
    let in_len = xs.c * xs.plane();
    let out_len = ys.c * ys.plane();
    let (k, p) = (patch.rows(), patch.cols());
    let mut dx = vec![T::zero(); xs.numel()];
    let dw_parts: Vec<Vec<T>> = dx
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(b, dxb)| {
            let mut cols = vec![T::zero(); k * p];
            patch.im2col(&dy.data()[b * out_len..(b + 1) * out_len], &mut cols);
            gemm_nn(xs.c, k, p, w.data(), &cols, dxb);
            let mut dwb = vec![T::zero(); ws.numel()];
            gemm_nt(xs.c, p, k, &x.data()[b * in_len..(b + 1) * in_len], &cols, &mut dwb);
            dwb
        })
        .collect();
    let dw = sum_in_order(dw_parts, ws.numel());
    (
        Tensor4::from_vec(xs, dx).unwrap(),
        Tensor4::from_vec(ws, dw).unwrap(),
    )
}

/// Per-channel statistics over (n, h, w) with biased variance.
pub fn channel_moments<T: Scalar>(x: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let o = s.offset(n, c, 0, 0);
            acc += x.data()[o..o + s.plane()].iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            let o = s.offset(n, c, 0, 0);
            sq += x.data()[o..o + s.plane()].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Normalizes with the given per-channel statistics and applies the affine
/// transform. Returns `(y, xhat, inv_std)`.
pub fn batch_norm_apply<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let s = x.shape();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let o = s.offset(n, c, 0, 0);
            for i in o..o + s.plane() {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the statistics are
/// treated as functions of `x`; otherwise as constants (eval mode).
pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor4<T>,
    xhat: &Tensor4<T>,
    gamma: &[T],
    inv_std: &[T],
    batch_stats: bool,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = dy.shape();
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let o = s.offset(n, c, 0, 0);
            for i in o..o + s.plane() {
                dgamma[c] += dy.data()[i] * xhat.data()[i];
                dbeta[c] += dy.data()[i];
            }
        }
    }
    let mut dx = dy.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let o = s.offset(n, c, 0, 0);
            let k = gamma[c] * inv_std[c];
            for i in o..o + s.plane() {
                let g = dy.data()[i];
                dx.data_mut()[i] = if batch_stats {
                    k * (g - dbeta[c] / count - xhat.data()[i] * dgamma[c] / count)
                } else {
                    k * g
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling with implicit `-inf` padding. Returns the output and, per
/// output element, the flat input index that won.
pub fn max_pool2d<T: Scalar>(
    x: &Tensor4<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor4<T>, Vec<usize>), TensorError> {
    if kernel == 0 || stride == 0 {
        return Err(TensorError::Config("max_pool2d needs kernel and stride >= 1".into()));
    }
    if padding * 2 > kernel {
        return Err(TensorError::Config("max_pool2d padding exceeds half the kernel".into()));
    }
    let s = x.shape();
    let geom = ConvGeom::new(stride, padding, 1);
    let oh = geom.conv_out(s.h, kernel)?;
    let ow = geom.conv_out(s.w, kernel)?;
    let out_shape = Shape4::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let i = s.offset(n, c, iy as usize, ix as usize);
                            let v = x.data()[i];
                            if v > best || best_i == usize::MAX {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(out_shape, out)?, arg))
}

/// Source taps of one output coordinate under the align-corners=false
/// convention: `(i0, i1, weight of i1)`.
#[inline]
fn linear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let lambda = if i0 == i1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, lambda)
}

/// Bilinear resize of every plane to `(out_h, out_w)`, align-corners=false.
pub fn resize_bilinear<T: Scalar>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>, TensorError> {
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::Config("resize to an empty extent".into()));
    }
    let s = x.shape();
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let ys: Vec<_> = (0..out_h).map(|y| linear_taps(y, s.h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| linear_taps(x, s.w, out_w)).collect();
    let out = Tensor4::from_fn(Shape4::new(s.n, s.c, out_h, out_w), |n, c, oy, ox| {
        let (y0, y1, ly) = ys[oy];
        let (x0, x1, lx) = xs[ox];
        let (ly, lx) = (T::lit(ly), T::lit(lx));
        let top = x.at(n, c, y0, x0) * (T::one() - lx) + x.at(n, c, y0, x1) * lx;
        let bot = x.at(n, c, y1, x0) * (T::one() - lx) + x.at(n, c, y1, x1) * lx;
        top * (T::one() - ly) + bot * ly
    });
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients onto the input grid.
pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor4<T>, in_h: usize, in_w: usize) -> Tensor4<T> {
    let s = dy.shape();
    if (in_h, in_w) == (s.h, s.w) {
        return dy.clone();
    }
    let ys: Vec<_> = (0..s.h).map(|y| linear_taps(y, in_h, s.h)).collect();
    let xs: Vec<_> = (0..s.w).map(|x| linear_taps(x, in_w, s.w)).collect();
    let mut dx = Tensor4::zeros(Shape4::new(s.n, s.c, in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let g = dy.at(n, c, oy, ox);
                    let (ly, lx) = (T::lit(ly), T::lit(lx));
                    *dx.at_mut(n, c, y0, x0) += g * (T::one() - ly) * (T::one() - lx);
                    *dx.at_mut(n, c, y0, x1) += g * (T::one() - ly) * lx;
                    *dx.at_mut(n, c, y1, x0) += g * ly * (T::one() - lx);
                    *dx.at_mut(n, c, y1, x1) += g * ly * lx;
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let denom = T::from_usize(s.plane()).unwrap();
    Tensor4::from_fn(Shape4::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let o = s.offset(n, c, 0, 0);
        x.data()[o..o + s.plane()].iter().copied().sum::<T>() / denom
    })
}

/// Numerically stable per-pixel softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(logits: &Tensor4<T>) -> Tensor4<T> {
    let s = logits.shape();
    let mut out = logits.clone();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut m = T::neg_infinity();
                for c in 0..s.c {
                    m = m.max(logits.at(n, c, y, x));
                }
                let mut z = T::zero();
                for c in 0..s.c {
                    let e = (logits.at(n, c, y, x) - m).exp();
                    *out.at_mut(n, c, y, x) = e;
                    z += e;
                }
                for c in 0..s.c {
                    *out.at_mut(n, c, y, x) /= z;
                }
            }
        }
    }
    out
}

/// Per-pixel index of the largest channel.
pub fn argmax_channels<T: Scalar>(x: &Tensor4<T>) -> Vec<u8> {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let mut best = 0;
                for c in 1..s.c {
                    if x.at(n, c, y, xx) > x.at(n, best, y, xx) {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    out
}
