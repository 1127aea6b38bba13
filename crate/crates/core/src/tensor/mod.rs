//! Rank-4 tensors and the reverse-mode tape that differentiates through them.
//!
//! Every value in the network is an NCHW `f32` tensor. Operations are recorded
//! on a [`Tape`]; calling [`Tape::backward`] on a scalar replays the recording
//! in reverse and accumulates gradients into every leaf that asked for one.

mod f16;
mod gradcheck;
mod kernels;
mod tape;

pub use f16::{cast_f16_roundtrip, round_f16, F16_MAX};
pub use gradcheck::{finite_diff_check, finite_diff_report, GradCheckReport};
pub use kernels::ConvParams;
pub use tape::{BatchNormParams, CustomOp, Precision, Tape, Var};

use std::fmt;
use std::ops::Range;

use crate::error::{Result, ScanetError};

/// `(n, c, h, w)` extent of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.n == 1 && self.c == 1 && self.h == 1 && self.w == 1
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor of `f32` values with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(ScanetError::shape(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor { shape, data: vec![value; shape.numel()], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f32) -> Self {
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(ScanetError::shape(
                "accumulate_grad",
                format!("gradient of {} values for tensor {}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Resets the gradient to zeros (keeps the slot allocated).
    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Value of a `1x1x1x1` tensor.
    pub fn item(&self) -> Result<f32> {
        if !self.shape.is_scalar() {
            return Err(ScanetError::shape("item", format!("expected scalar, got {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.data.len() {
            return Err(ScanetError::shape("reshape", format!("{} -> {shape}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Copies channels `range` into a new tensor.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Tensor> {
        let s = self.shape;
        if range.start > range.end || range.end > s.c {
            return Err(ScanetError::shape(
                "slice_channels",
                format!("range {range:?} out of {} channels", s.c),
            ));
        }
        let out_shape = Shape::new(s.n, range.end - range.start, s.h, s.w);
        let plane = s.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            let start = (n * s.c + range.start) * plane;
            let end = (n * s.c + range.end) * plane;
            data.extend_from_slice(&self.data[start..end]);
        }
        Tensor::from_vec(out_shape, data)
    }

    /// Extracts batch item `n` as a `1xCxHxW` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let s = self.shape;
        if n >= s.n {
            return Err(ScanetError::shape("batch_item", format!("index {n} of {}", s.n)));
        }
        let len = s.c * s.plane();
        Tensor::from_vec(Shape::new(1, s.c, s.h, s.w), self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| ScanetError::invalid("stack of zero tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(ScanetError::shape("stack", format!("{first} vs {s}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Nearest-neighbour resampling to `h x w`; keeps binary masks binary.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Tensor {
        let s = self.shape;
        let out_shape = Shape::new(s.n, s.c, h, w);
        let mut out = Tensor::zeros(out_shape);
        for nc in 0..s.n * s.c {
            let src = &self.data[nc * s.plane()..(nc + 1) * s.plane()];
            let dst = &mut out.data[nc * h * w..(nc + 1) * h * w];
            for y in 0..h {
                let sy = ((y * 2 + 1) * s.h / (2 * h)).min(s.h - 1);
                for x in 0..w {
                    let sx = ((x * 2 + 1) * s.w / (2 * w)).min(s.w - 1);
                    dst[y * w + x] = src[sy * s.w + sx];
                }
            }
        }
        out
    }
}
