//! Convolution and pooling kernels on NCHW buffers.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(Error::shape("conv2d", input, weight));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (k, kh, kw) = (weight[0], weight[2], weight[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", input, weight));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.k, self.oh, self.ow]
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ki, kj)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds the batch into a `[C·kh·kw, N·OH·OW]` column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.positions();
    let mut cols = vec![T::zero(); g.patch() * np];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * np..(r + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let base = n * g.positions();
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            if let Some((y, xx)) = g.source(oy, ox, ki, kj) {
                                row[base + oy * g.ow + ox] = plane[y * g.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column-gradient matrix back onto the input layout, accumulating.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let np = g.n * g.positions();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * np..(r + 1) * np];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let base = n * g.positions();
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            if let Some((y, xx)) = g.source(oy, ox, ki, kj) {
                                plane[y * g.w + xx] += row[base + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(
    cols: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let np = g.n * g.positions();
    let mut mat = vec![T::zero(); g.k * np];
    gemm(
        Mat::new(weight, g.k, g.patch()),
        Mat::new(cols, g.patch(), np),
        &mut mat,
        false,
    );
    let p = g.positions();
    let mut out = vec![T::zero(); g.n * g.k * p];
    for k in 0..g.k {
        let b = bias.map_or(T::zero(), |b| b[k]);
        for n in 0..g.n {
            let src = &mat[k * np + n * p..][..p];
            let dst = &mut out[(n * g.k + k) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

/// Reorders an NCHW output gradient into the `[K, N·OH·OW]` matrix layout.
pub(crate) fn dout_matrix<T: Real>(dout: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let mut mat = vec![T::zero(); g.k * np];
    for n in 0..g.n {
        for k in 0..g.k {
            mat[k * np + n * p..][..p].copy_from_slice(&dout[(n * g.k + k) * p..][..p]);
        }
    }
    mat
}

pub(crate) fn conv_weight_grad<T: Real>(dmat: &[T], cols: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.positions();
    let mut dw = vec![T::zero(); g.k * g.patch()];
    gemm(
        Mat::new(dmat, g.k, np),
        Mat::t(cols, np, g.patch()),
        &mut dw,
        false,
    );
    dw
}

pub(crate) fn conv_bias_grad<T: Real>(dmat: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.positions();
    dmat.chunks(np)
        .map(|row| row.iter().copied().sum())
        .collect()
}

pub(crate) fn conv_input_grad<T: Real>(dmat: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.positions();
    let mut dcols = vec![T::zero(); g.patch() * np];
    gemm(
        Mat::t(weight, g.patch(), g.k),
        Mat::new(dmat, g.k, np),
        &mut dcols,
        false,
    );
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    col2im(&dcols, g, &mut dx);
    dx
}

/// Max pooling without padding. Returns the output and, for each output
/// element, the flat input index it was taken from.
pub(crate) fn max_pool_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    kernel: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::shape("max_pool2d", shape, &[kernel, kernel]));
    }
    if kernel == 0 || stride == 0 || shape[2] < kernel || shape[3] < kernel {
        return Err(Error::invalid(format!(
            "max_pool2d kernel {kernel} stride {stride} on {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out, arg))
}
