//! Value-level forward and backward kernels.
//!
//! The tape calls into these for its nodes; gradient-free code paths (channel
//! importance scoring, inference) call them directly without recording anything.

use super::{check_rank, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Geometry of a 2-D cross-correlation with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn infer(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        if input.len() != 4 || kernel.len() != 4 {
            return Err(shape_err(
                OP,
                format!("input {input:?} and kernel {kernel:?} must both be rank 4"),
            ));
        }
        if stride == 0 {
            return Err(shape_err(OP, "stride must be positive"));
        }
        let [n, c_in, h, w] = [input[0], input[1], input[2], input[3]];
        let [c_out, kc, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if kc != c_in {
            return Err(shape_err(
                OP,
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if bias != [c_out] {
            return Err(shape_err(
                OP,
                format!("bias {bias:?} does not match {c_out} output channels"),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err(
                OP,
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output columns `ow` whose input column `ow*stride + kx - pad` lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        range_for(self.ow, self.w, self.stride, self.pad, kx)
    }

    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        range_for(self.oh, self.h, self.stride, self.pad, ky)
    }
}

fn range_for(out: usize, size: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // o*stride + k - pad in [0, size)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let g = ConvGeometry::infer(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let (kk, plane) = (g.col_rows(), g.oh * g.ow);
    let mut cols = vec![S::zero(); if g.is_pointwise() { 0 } else { kk * plane }];
    let mut out = vec![S::zero(); g.n * g.c_out * plane];
    for n in 0..g.n {
        let xin = &input.data()[n * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w];
        let cols: &[S] = if g.is_pointwise() {
            xin
        } else {
            im2col(&g, xin, &mut cols);
            &cols
        };
        let o = &mut out[n * g.c_out * plane..][..g.c_out * plane];
        for (row, &b) in o.chunks_exact_mut(plane).zip(bias.data()) {
            row.fill(b);
        }
        gemm_acc(g.c_out, kk, plane, kernel.data(), cols, o);
    }
    Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out)
}

/// Gradients of a convolution with respect to (input, kernel, bias).
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    g: &ConvGeometry,
    grad_out: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let x = input.data();
    let k = kernel.data();
    let (kk, plane, img) = (g.col_rows(), g.oh * g.ow, g.c_in * g.h * g.w);
    let mut gx = vec![S::zero(); x.len()];
    let mut gk = vec![S::zero(); k.len()];
    let mut gb = vec![S::zero(); g.c_out];
    let mut cols = vec![S::zero(); kk * plane];
    let mut cols_t = vec![S::zero(); kk * plane];
    let mut gcols = vec![S::zero(); kk * plane];
    for n in 0..g.n {
        let xin = &x[n * img..][..img];
        let go = &grad_out[n * g.c_out * plane..][..g.c_out * plane];
        for (b, row) in gb.iter_mut().zip(go.chunks_exact(plane)) {
            *b += row.iter().copied().sum::<S>();
        }
        if g.is_pointwise() {
            cols.copy_from_slice(xin);
        } else {
            im2col(g, xin, &mut cols);
        }
        transpose(kk, plane, &cols, &mut cols_t);
        // gk[co, r] += sum_p go[co, p] * cols[r, p]
        gemm_acc(g.c_out, plane, kk, go, &cols_t, &mut gk);
        // gcols[r, p] = sum_co k[co, r] * go[co, p]
        gcols.fill(S::zero());
        gemm_atb_acc(g.c_out, kk, plane, k, go, &mut gcols);
        let gxn = &mut gx[n * img..][..img];
        if g.is_pointwise() {
            gxn.iter_mut().zip(&gcols).for_each(|(a, &b)| *a += b);
        } else {
            col2im_add(g, &gcols, gxn);
        }
    }
    (gx, gk, gb)
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// 1x1 kernel, unit stride, no padding: the unfolded input is the input.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[c_in, h, w]` into `[c_in*kh*kw, oh*ow]`; padding reads as zero.
fn im2col<S: Scalar>(g: &ConvGeometry, xin: &[S], cols: &mut [S]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c_in {
        let xc = &xin[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (r0, r1) = g.valid_rows(ky);
            for kx in 0..g.kw {
                let (c0, c1) = g.valid_cols(kx);
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * plane..][..plane];
                row.fill(S::zero());
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in c0..c1 {
                        orow[ox] = xrow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im_add<S: Scalar>(g: &ConvGeometry, cols: &[S], gx: &mut [S]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c_in {
        let xc = &mut gx[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (r0, r1) = g.valid_rows(ky);
            for kx in 0..g.kw {
                let (c0, c1) = g.valid_cols(kx);
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let grow = &row[oy * g.ow..(oy + 1) * g.ow];
                    let xrow = &mut xc[iy * g.w..(iy + 1) * g.w];
                    for ox in c0..c1 {
                        xrow[ox * g.stride + kx - g.pad] += grow[ox];
                    }
                }
            }
        }
    }
}

fn transpose<S: Copy>(rows: usize, cols: usize, a: &[S], out: &mut [S]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// `c[m, n] += sum_k a[m, k] * b[k, n]`, all row-major.
fn gemm_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..][..n]) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k, n] += sum_m a[m, k] * b[m, n]`, all row-major.
fn gemm_atb_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let brow = &b[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            for (cv, &bv) in c[p * n..][..n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn global_avgpool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    check_rank("global_avgpool", x, 4)?;
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let inv = S::one() / S::of_usize(plane);
    let out = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<S>() * inv)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn dense<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, d, k) = dense_dims(x, weight, bias)?;
    let mut out = Vec::with_capacity(n * k);
    for row in x.data().chunks_exact(d) {
        for (j, wrow) in weight.data().chunks_exact(d).enumerate() {
            let dot: S = row.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
            out.push(dot + bias.data()[j]);
        }
    }
    Tensor::new(vec![n, k], out)
}

pub(crate) fn dense_dims<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(usize, usize, usize)> {
    check_rank("dense", x, 2)?;
    check_rank("dense", weight, 2)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (k, wd) = (weight.shape()[0], weight.shape()[1]);
    if wd != d {
        return Err(shape_err(
            "dense",
            format!("input width {d} vs weight {:?}", weight.shape()),
        ));
    }
    if bias.shape() != [k] {
        return Err(shape_err(
            "dense",
            format!("bias {:?} vs {k} outputs", bias.shape()),
        ));
    }
    Ok((n, d, k))
}

/// Row-wise softmax over the last axis of a rank-2 tensor, max-subtracted.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    check_rank("softmax", x, 2)?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let k = x.shape()[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(k) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: S = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn log_softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    check_rank("log_softmax", x, 2)?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "log_softmax" });
    }
    let k = x.shape()[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(k) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Zeroes every channel `i` of an `[N, C, H, W]` tensor with `keep[i] == false`.
pub fn mask_channels<S: Scalar>(x: &Tensor<S>, keep: &[bool]) -> Result<Tensor<S>> {
    check_rank("mask_channels", x, 4)?;
    let s = x.shape();
    if keep.len() != s[1] {
        return Err(shape_err(
            "mask_channels",
            format!("mask of length {} for {} channels", keep.len(), s[1]),
        ));
    }
    let plane = s[2] * s[3];
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        if !keep[idx % s[1]] {
            chunk.fill(S::zero());
        }
    }
    Ok(out)
}
