//! Raw NCHW kernels on flat slices.
//!
//! Each output element is accumulated in a fixed order (input channel, then
//! kernel row, then kernel column, ascending) regardless of how work is split
//! across threads, so results are bit-identical run to run.

use std::ops::AddAssign;

use num_traits::Float;
use rayon::prelude::*;

use super::Shape;
use crate::error::{Result, ScanetError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams { stride, padding, groups }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams::new(1, 0, 1)
    }
}

/// Element type the kernels run in. Training uses `f32`; `f64` exists so
/// gradient checks are not swamped by `f32` rounding.
pub(crate) trait Real: Float + AddAssign + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Validates a convolution and returns its output shape.
pub(crate) fn conv_output_shape(
    x: Shape,
    w: Shape,
    bias_len: Option<usize>,
    p: ConvParams,
) -> Result<Shape> {
    let mismatch = |why: &str| {
        ScanetError::shape("conv2d", format!("input {x}, weight {w}: {why}"))
    };
    if p.stride == 0 {
        return Err(ScanetError::invalid("conv2d stride must be >= 1"));
    }
    if p.groups == 0 || !x.c.is_multiple_of(p.groups) || !w.n.is_multiple_of(p.groups) {
        return Err(mismatch(&format!("channels not divisible by groups={}", p.groups)));
    }
    if w.h != w.w || w.h == 0 {
        return Err(mismatch("kernel must be square and non-empty"));
    }
    if w.c * p.groups != x.c {
        return Err(mismatch(&format!("expected {} input channels per group", x.c / p.groups)));
    }
    if let Some(len) = bias_len {
        if len != w.n {
            return Err(mismatch(&format!("bias has {len} values for {} filters", w.n)));
        }
    }
    let k = w.h;
    if x.h + 2 * p.padding < k || x.w + 2 * p.padding < k {
        return Err(mismatch("kernel larger than padded input"));
    }
    let oh = (x.h + 2 * p.padding - k) / p.stride + 1;
    let ow = (x.w + 2 * p.padding - k) / p.stride + 1;
    Ok(Shape::new(x.n, w.n, oh, ow))
}

/// Range of output columns whose tap `kx` lands inside the input row,
/// together with the first input column.
#[inline]
fn valid_range(out_len: usize, in_len: usize, kpos: usize, stride: usize, pad: usize) -> (usize, usize, usize) {
    // ix = o*stride + kpos - pad must satisfy 0 <= ix < in_len
    let lo = if kpos >= pad { 0 } else { (pad - kpos).div_ceil(stride) };
    let hi_num = in_len as isize - 1 + pad as isize - kpos as isize;
    if hi_num < 0 {
        return (0, 0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out_len);
    if lo >= hi {
        return (0, 0, 0);
    }
    let first_in = lo * stride + kpos - pad;
    (lo, hi, first_in)
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    p: ConvParams,
    os: Shape,
) -> Vec<T> {
    let k = ws.h;
    let icg = ws.c;
    let ocg = ws.n / p.groups;
    let oplane = os.plane();
    let iplane = xs.plane();
    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(oplane.max(1)).enumerate().for_each(|(idx, dst)| {
        let n = idx / os.c;
        let oc = idx % os.c;
        let g = oc / ocg;
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[oc]);
        }
        for icl in 0..icg {
            let ic = g * icg + icl;
            let src = &x[(n * xs.c + ic) * iplane..(n * xs.c + ic + 1) * iplane];
            for ky in 0..k {
                let (oy0, oy1, iy0) = valid_range(os.h, xs.h, ky, p.stride, p.padding);
                for kx in 0..k {
                    let wv = w[((oc * icg + icl) * k + ky) * k + kx];
                    let (ox0, ox1, ix0) = valid_range(os.w, xs.w, kx, p.stride, p.padding);
                    if ox0 == ox1 {
                        continue;
                    }
                    for (j, oy) in (oy0..oy1).enumerate() {
                        let iy = iy0 + j * p.stride;
                        let srow = &src[iy * xs.w..(iy + 1) * xs.w];
                        let drow = &mut dst[oy * os.w + ox0..oy * os.w + ox1];
                        if p.stride == 1 {
                            let s = &srow[ix0..ix0 + drow.len()];
                            drow.iter_mut().zip(s).for_each(|(d, &s)| *d += wv * s);
                        } else {
                            for (i, d) in drow.iter_mut().enumerate() {
                                *d += wv * srow[ix0 + i * p.stride];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_input<T: Real>(
    dy: &[T],
    os: Shape,
    w: &[T],
    ws: Shape,
    xs: Shape,
    p: ConvParams,
) -> Vec<T> {
    let k = ws.h;
    let icg = ws.c;
    let ocg = ws.n / p.groups;
    let oplane = os.plane();
    let iplane = xs.plane();
    let mut dx = vec![T::zero(); xs.numel()];
    dx.par_chunks_mut(iplane).enumerate().for_each(|(idx, dst)| {
        let n = idx / xs.c;
        let ic = idx % xs.c;
        let g = ic / icg;
        let icl = ic % icg;
        for oc in g * ocg..(g + 1) * ocg {
            let src = &dy[(n * os.c + oc) * oplane..(n * os.c + oc + 1) * oplane];
            for ky in 0..k {
                let (oy0, oy1, iy0) = valid_range(os.h, xs.h, ky, p.stride, p.padding);
                for kx in 0..k {
                    let wv = w[((oc * icg + icl) * k + ky) * k + kx];
                    let (ox0, ox1, ix0) = valid_range(os.w, xs.w, kx, p.stride, p.padding);
                    if ox0 == ox1 {
                        continue;
                    }
                    for (j, oy) in (oy0..oy1).enumerate() {
                        let iy = iy0 + j * p.stride;
                        let grow = &src[oy * os.w + ox0..oy * os.w + ox1];
                        let drow = &mut dst[iy * xs.w..(iy + 1) * xs.w];
                        if p.stride == 1 {
                            let d = &mut drow[ix0..ix0 + grow.len()];
                            d.iter_mut().zip(grow).for_each(|(d, &g)| *d += wv * g);
                        } else {
                            for (i, &g) in grow.iter().enumerate() {
                                drow[ix0 + i * p.stride] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn conv2d_grad_weight<T: Real>(
    dy: &[T],
    os: Shape,
    x: &[T],
    xs: Shape,
    ws: Shape,
    p: ConvParams,
) -> Vec<T> {
    let k = ws.h;
    let icg = ws.c;
    let ocg = ws.n / p.groups;
    let oplane = os.plane();
    let iplane = xs.plane();
    let per_filter = icg * k * k;
    let mut dw = vec![T::zero(); ws.numel()];
    dw.par_chunks_mut(per_filter).enumerate().for_each(|(oc, dst)| {
        let g = oc / ocg;
        for icl in 0..icg {
            let ic = g * icg + icl;
            for ky in 0..k {
                let (oy0, oy1, iy0) = valid_range(os.h, xs.h, ky, p.stride, p.padding);
                for kx in 0..k {
                    let (ox0, ox1, ix0) = valid_range(os.w, xs.w, kx, p.stride, p.padding);
                    let mut acc = 0f64;
                    if ox0 < ox1 {
                        for n in 0..xs.n {
                            let gsrc = &dy[(n * os.c + oc) * oplane..(n * os.c + oc + 1) * oplane];
                            let xsrc = &x[(n * xs.c + ic) * iplane..(n * xs.c + ic + 1) * iplane];
                            for (j, oy) in (oy0..oy1).enumerate() {
                                let iy = iy0 + j * p.stride;
                                let grow = &gsrc[oy * os.w + ox0..oy * os.w + ox1];
                                let xrow = &xsrc[iy * xs.w..(iy + 1) * xs.w];
                                let mut row = T::zero();
                                if p.stride == 1 {
                                    let xr = &xrow[ix0..ix0 + grow.len()];
                                    row = grow.iter().zip(xr).fold(T::zero(), |a, (&g, &v)| a + g * v);
                                } else {
                                    for (i, &g) in grow.iter().enumerate() {
                                        row += g * xrow[ix0 + i * p.stride];
                                    }
                                }
                                acc += row.f64();
                            }
                        }
                    }
                    dst[(icl * k + ky) * k + kx] = T::of(acc);
                }
            }
        }
    });
    dw
}

pub(crate) fn conv2d_grad_bias<T: Real>(dy: &[T], os: Shape) -> Vec<T> {
    let plane = os.plane();
    (0..os.c)
        .map(|oc| {
            let mut acc = 0f64;
            for n in 0..os.n {
                let s = &dy[(n * os.c + oc) * plane..(n * os.c + oc + 1) * plane];
                acc += s.iter().map(|v| v.f64()).sum::<f64>();
            }
            T::of(acc)
        })
        .collect()
}

/// Source index pair and interpolation weight for half-pixel bilinear sampling.
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = (src - i0 as f64) as f32;
            (i0, i1, if i0 == i1 { 0.0 } else { l })
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], xs: Shape, factor: usize) -> (Vec<T>, Shape) {
    let os = Shape::new(xs.n, xs.c, xs.h * factor, xs.w * factor);
    let ty = bilinear_taps(os.h, xs.h, factor);
    let tx = bilinear_taps(os.w, xs.w, factor);
    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(os.plane().max(1)).enumerate().for_each(|(idx, dst)| {
        let src = &x[idx * xs.plane()..(idx + 1) * xs.plane()];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly as f64);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx as f64);
                let a = src[y0 * xs.w + x0];
                let b = src[y0 * xs.w + x1];
                let c = src[y1 * xs.w + x0];
                let d = src[y1 * xs.w + x1];
                let top = a + lx * (b - a);
                let bot = c + lx * (d - c);
                dst[oy * os.w + ox] = top + ly * (bot - top);
            }
        }
    });
    (out, os)
}

pub(crate) fn upsample_backward<T: Real>(dy: &[T], xs: Shape, factor: usize) -> Vec<T> {
    let oh = xs.h * factor;
    let ow = xs.w * factor;
    let ty = bilinear_taps(oh, xs.h, factor);
    let tx = bilinear_taps(ow, xs.w, factor);
    let mut dx = vec![T::zero(); xs.numel()];
    dx.par_chunks_mut(xs.plane().max(1)).enumerate().for_each(|(idx, dst)| {
        let src = &dy[idx * oh * ow..(idx + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly as f64);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx as f64);
                let one = T::one();
                let g = src[oy * ow + ox];
                dst[y0 * xs.w + x0] += g * (one - ly) * (one - lx);
                dst[y0 * xs.w + x1] += g * (one - ly) * lx;
                dst[y1 * xs.w + x0] += g * ly * (one - lx);
                dst[y1 * xs.w + x1] += g * ly * lx;
            }
        }
    });
    dx
}
