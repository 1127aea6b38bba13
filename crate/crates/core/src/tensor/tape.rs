use super::f16::round_slice_f16;
use super::kernels::{self, ConvParams, Real};
use super::{Shape, Tensor};
use crate::error::{Result, ScanetError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormParams {
    pub training: bool,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormParams {
    pub const MOMENTUM: f32 = 0.1;
    pub const EPS: f32 = 1e-5;

    pub fn new(training: bool) -> Self {
        BatchNormParams { training, momentum: Self::MOMENTUM, eps: Self::EPS }
    }
}

/// Operation defined outside the tape (the segmentation losses use this).
pub trait CustomOp: Send {
    /// Output values from flat input values. Evaluated in `f64` and rounded
    /// to the tape's precision.
    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64>;

    /// One optional gradient per input, each the length of that input.
    /// Values arrive widened to `f64` whatever the tape precision.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_output: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Arithmetic mode of a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    /// `f32` arithmetic with every recorded value rounded through binary16.
    F16,
    /// `f64` evaluation and backpropagation, for gradient checks. Values and
    /// gradients are also readable rounded to `f32`.
    F64,
}

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, p: ConvParams },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Relu(Var),
    Relu6(Var),
    Sigmoid(Var),
    Upsample { x: Var, factor: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    OneMinus(Var),
    Scale { a: Var, k: f32 },
    Concat { a: Var, b: Var },
    GlobalAvgPool(Var),
    FullyConnected { x: Var, w: Var, b: Var },
    Sum(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    exact: Option<Vec<f64>>,
    exact_grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// A forward computation that can run in either `f32` or `f64`.
trait Kernel {
    fn run<T: Real>(&self, inputs: &[&[T]]) -> Vec<T>;
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Relu6,
    Sigmoid,
    OneMinus,
    Scale(f32),
}

impl Kernel for Unary {
    fn run<T: Real>(&self, inputs: &[&[T]]) -> Vec<T> {
        let x = inputs[0];
        let (zero, one, six) = (T::zero(), T::one(), T::of(6.0));
        match *self {
            Unary::Relu => x.iter().map(|&v| v.max(zero)).collect(),
            Unary::Relu6 => x.iter().map(|&v| v.max(zero).min(six)).collect(),
            Unary::Sigmoid => x.iter().map(|&v| sigmoid_t(v)).collect(),
            Unary::OneMinus => x.iter().map(|&v| one - v).collect(),
            Unary::Scale(k) => {
                let k = T::of(k as f64);
                x.iter().map(|&v| v * k).collect()
            }
        }
    }
}

struct ConvKernel {
    xs: Shape,
    ws: Shape,
    os: Shape,
    p: ConvParams,
    bias: bool,
}

impl Kernel for ConvKernel {
    fn run<T: Real>(&self, i: &[&[T]]) -> Vec<T> {
        let bias = if self.bias { Some(i[2]) } else { None };
        kernels::conv2d_forward(i[0], self.xs, i[1], self.ws, bias, self.p, self.os)
    }
}

struct UpsampleKernel {
    xs: Shape,
    factor: usize,
}

impl Kernel for UpsampleKernel {
    fn run<T: Real>(&self, i: &[&[T]]) -> Vec<T> {
        kernels::upsample_forward(i[0], self.xs, self.factor).0
    }
}

/// Elementwise binary op where `b` may be single-channel.
struct BroadcastKernel {
    sa: Shape,
    b_single: bool,
    mul: bool,
}

impl Kernel for BroadcastKernel {
    fn run<T: Real>(&self, i: &[&[T]]) -> Vec<T> {
        let (a, b) = (i[0], i[1]);
        let s = self.sa;
        let plane = s.plane();
        let mut out = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                let bbase = if self.b_single { n * plane } else { base };
                for k in 0..plane {
                    let (x, y) = (a[base + k], b[bbase + k]);
                    out[base + k] = if self.mul { x * y } else { x + y };
                }
            }
        }
        out
    }
}

struct ConcatKernel {
    sa: Shape,
    sb: Shape,
}

impl Kernel for ConcatKernel {
    fn run<T: Real>(&self, i: &[&[T]]) -> Vec<T> {
        let plane = self.sa.plane();
        let (ca, cb) = (self.sa.c * plane, self.sb.c * plane);
        let mut out = Vec::with_capacity(self.sa.n * (ca + cb));
        for n in 0..self.sa.n {
            out.extend_from_slice(&i[0][n * ca..(n + 1) * ca]);
            out.extend_from_slice(&i[1][n * cb..(n + 1) * cb]);
        }
        out
    }
}

struct PoolKernel {
    s: Shape,
}

impl Kernel for PoolKernel {
    fn run<T: Real>(&self, i: &[&[T]]) -> Vec<T> {
        let plane = self.s.plane();
        (0..self.s.n * self.s.c)
            .map(|k| {
                let sum: f64 = i[0][k * plane..(k + 1) * plane].iter().map(|v| v.f64()).sum();
                T::of(sum / plane as f64)
            })
            .collect()
    }
}

struct FcKernel {
    n: usize,
    c: usize,
    outs: usize,
}

impl Kernel for FcKernel {
    fn run<T: Real>(&self, i: &[&[T]]) -> Vec<T> {
        let (x, w, b) = (i[0], i[1], i[2]);
        let mut out = vec![T::zero(); self.n * self.outs];
        for n in 0..self.n {
            for o in 0..self.outs {
                let mut acc = b[o];
                for c in 0..self.c {
                    acc += w[o * self.c + c] * x[n * self.c + c];
                }
                out[n * self.outs + o] = acc;
            }
        }
        out
    }
}

struct SumKernel;

impl Kernel for SumKernel {
    fn run<T: Real>(&self, i: &[&[T]]) -> Vec<T> {
        vec![T::of(i[0].iter().map(|v| v.f64()).sum())]
    }
}

/// Batch-norm forward. Statistics are accumulated in `f64`.
struct BnKernel<'r> {
    s: Shape,
    p: BatchNormParams,
    running_mean: &'r [f32],
    running_var: &'r [f32],
}

struct BnOut<T> {
    out: Vec<T>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

impl BnKernel<'_> {
    fn run<T: Real>(&self, xd: &[T], g: &[T], bt: &[T]) -> BnOut<T> {
        let s = self.s;
        let plane = s.plane();
        let count = s.n * plane;
        let mut r = BnOut {
            out: vec![T::zero(); s.numel()],
            mean: vec![0f64; s.c],
            inv_std: vec![0f64; s.c],
            batch_mean: vec![0f64; s.c],
            batch_var_unbiased: vec![0f64; s.c],
        };
        for c in 0..s.c {
            let (mean, var) = if self.p.training {
                let mut sum = 0f64;
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    sum += xd[base..base + plane].iter().map(|v| v.f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0f64;
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    sq += xd[base..base + plane].iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / count as f64;
                r.batch_mean[c] = mean;
                r.batch_var_unbiased[c] = if count > 1 { sq / (count - 1) as f64 } else { var };
                (mean, var)
            } else {
                (self.running_mean[c] as f64, self.running_var[c] as f64)
            };
            let is = 1.0 / (var + self.p.eps as f64).sqrt();
            r.mean[c] = mean;
            r.inv_std[c] = is;
            let (gc, bc) = (g[c].f64(), bt[c].f64());
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    r.out[i] = T::of(gc * ((xd[i].f64() - mean) * is) + bc);
                }
            }
        }
        r
    }
}

/// Linear recording of a forward pass.
///
/// Nodes are appended in execution order, so a reverse walk over the node
/// list is a valid topological order for backpropagation. A tape belongs to
/// one thread; kernels may still split work internally.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    flops: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { precision, ..Tape::default() }
    }

    /// A tape that rounds every recorded value through binary16.
    pub fn fp16() -> Self {
        Tape::with_precision(Precision::F16)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_fp16(&self) -> bool {
        self.precision == Precision::F16
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded value in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Floating-point operations of everything recorded so far
    /// (a multiply-accumulate counts as 2).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        let exact = match self.precision {
            Precision::F16 => {
                round_slice_f16(value.data_mut());
                None
            }
            Precision::F64 => Some(value.data().iter().map(|&v| v as f64).collect()),
            Precision::F32 => None,
        };
        self.nodes.push(Node { value, exact, exact_grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_exact(&mut self, shape: Shape, exact: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        let value = Tensor::from_vec(shape, exact.iter().map(|&v| v as f32).collect())?;
        self.nodes.push(Node { value, exact: Some(exact), exact_grad: None, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn exact(&self, v: Var) -> &[f64] {
        self.nodes[v.0].exact.as_deref().expect("f64 tape nodes carry exact values")
    }

    /// Runs `k` on the values of `inputs` in the tape's precision and records the result.
    fn record<K: Kernel>(&mut self, inputs: &[Var], shape: Shape, k: &K, op: Op) -> Result<Var> {
        let needs = inputs.iter().any(|&v| self.needs(v));
        if self.precision == Precision::F64 {
            let ins: Vec<&[f64]> = inputs.iter().map(|&v| self.exact(v)).collect();
            let out = k.run(&ins);
            self.push_exact(shape, out, op, needs)
        } else {
            let ins: Vec<&[f32]> = inputs.iter().map(|&v| self.value(v).data()).collect();
            let out = k.run(&ins);
            Ok(self.push(Tensor::from_vec(shape, out)?, op, needs))
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input tensor. Gradients are collected for it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Constant given in `f64`; kept exact on an `f64` tape.
    pub fn constant_f64(&mut self, shape: Shape, values: Vec<f64>) -> Result<Var> {
        if values.len() != shape.numel() {
            return Err(ScanetError::shape("constant_f64", format!("{} values for {shape}", values.len())));
        }
        if self.precision == Precision::F64 {
            self.push_exact(shape, values, Op::Leaf, false)
        } else {
            let t = Tensor::from_vec(shape, values.iter().map(|&v| v as f32).collect())?;
            Ok(self.constant(t))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Values of `v` in `f64`: exact on an `f64` tape, widened otherwise.
    pub fn value_f64(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].exact {
            Some(e) => e.clone(),
            None => self.value(v).data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    /// Which linear piece every recorded ReLU / ReLU6 input falls on
    /// (0 clipped low, 1 linear, 2 clipped high), in recording order.
    ///
    /// Two passes with equal patterns are on the same smooth piece of the
    /// network, so a difference quotient between them is meaningful.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (x, upper) = match node.op {
                Op::Relu(x) => (x, f64::INFINITY),
                Op::Relu6(x) => (x, 6.0),
                _ => continue,
            };
            out.extend(self.value_f64(x).iter().map(|&v| u8::from(v > 0.0) + u8::from(v >= upper)));
        }
        out
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bias_len = b.map(|b| self.value(b).numel());
        let os = kernels::conv_output_shape(xs, ws, bias_len, p)?;
        self.flops += 2 * (os.numel() * ws.c * ws.h * ws.w) as u64;
        if b.is_some() {
            self.flops += os.numel() as u64;
        }
        let k = ConvKernel { xs, ws, os, p, bias: b.is_some() };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(&inputs, os, &k, Op::Conv { x, w, b, p })
    }

    /// Per-channel batch normalisation.
    ///
    /// In training mode the batch statistics normalise the input and are
    /// folded into `running_mean` / `running_var` as
    /// `new = (1 - momentum) * old + momentum * batch` (the running variance
    /// uses the unbiased batch estimate). In eval mode the running statistics
    /// are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f32],
        running_var: &mut [f32],
        p: BatchNormParams,
    ) -> Result<Var> {
        let s = self.shape(x);
        for (name, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != s.c {
                return Err(ScanetError::shape(
                    "batch_norm",
                    format!("{name} has {len} values for input {s}"),
                ));
            }
        }
        if p.eps <= 0.0 {
            return Err(ScanetError::invalid("batch_norm eps must be positive"));
        }
        if p.training && s.n * s.plane() == 0 {
            return Err(ScanetError::invalid("batch_norm over an empty batch in training mode"));
        }
        let k = BnKernel { s, p, running_mean, running_var };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.flops += 2 * s.numel() as u64;
        let (var, stats) = if self.precision == Precision::F64 {
            let r = k.run(self.exact(x), self.exact(gamma), self.exact(beta));
            let op = Op::BatchNorm { x, gamma, beta, mean: r.mean, inv_std: r.inv_std, training: p.training };
            (self.push_exact(s, r.out, op, needs)?, (r.batch_mean, r.batch_var_unbiased))
        } else {
            let r = k.run(self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
            let op = Op::BatchNorm { x, gamma, beta, mean: r.mean, inv_std: r.inv_std, training: p.training };
            (self.push(Tensor::from_vec(s, r.out)?, op, needs), (r.batch_mean, r.batch_var_unbiased))
        };
        if p.training {
            let m = p.momentum as f64;
            for c in 0..s.c {
                running_mean[c] = ((1.0 - m) * running_mean[c] as f64 + m * stats.0[c]) as f32;
                running_var[c] = ((1.0 - m) * running_var[c] as f64 + m * stats.1[c]) as f32;
            }
        }
        Ok(var)
    }

    fn unary(&mut self, x: Var, kind: Unary, op: Op) -> Var {
        let s = self.shape(x);
        self.flops += s.numel() as u64;
        self.record(&[x], s, &kind, op).expect("unary ops preserve shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu, Op::Relu(x))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu6, Op::Relu6(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid, Op::Sigmoid(x))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::OneMinus, Op::OneMinus(x))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        self.unary(x, Unary::Scale(k), Op::Scale { a: x, k })
    }

    /// Half-pixel-centre bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(ScanetError::invalid("upsample factor must be >= 1"));
        }
        let xs = self.shape(x);
        let os = Shape::new(xs.n, xs.c, xs.h * factor, xs.w * factor);
        self.flops += 6 * os.numel() as u64;
        self.record(&[x], os, &UpsampleKernel { xs, factor }, Op::Upsample { x, factor })
    }

    fn broadcast_kernel(&self, op: &'static str, a: Var, b: Var, mul: bool) -> Result<BroadcastKernel> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(BroadcastKernel { sa, b_single: false, mul })
        } else if sb.c == 1 && (sa.n, sa.h, sa.w) == (sb.n, sb.h, sb.w) {
            Ok(BroadcastKernel { sa, b_single: true, mul })
        } else {
            Err(ScanetError::shape(op, format!("{sa} and {sb} are not compatible")))
        }
    }

    /// Elementwise sum. `b` may be single-channel, in which case it is
    /// broadcast over every channel of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.broadcast_kernel("add", a, b, false)?;
        self.flops += k.sa.numel() as u64;
        self.record(&[a, b], k.sa, &k, Op::Add { a, b })
    }

    /// Elementwise product with the same single-channel broadcast as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.broadcast_kernel("mul", a, b, true)?;
        self.flops += k.sa.numel() as u64;
        self.record(&[a, b], k.sa, &k, Op::Mul { a, b })
    }

    /// Channel concatenation, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(ScanetError::shape("concat_channels", format!("{sa} vs {sb}")));
        }
        let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        self.record(&[a, b], os, &ConcatKernel { sa, sb }, Op::Concat { a, b })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.plane() == 0 {
            return Err(ScanetError::shape("global_avg_pool", format!("empty spatial extent {s}")));
        }
        self.flops += s.numel() as u64;
        self.record(&[x], Shape::new(s.n, s.c, 1, 1), &PoolKernel { s }, Op::GlobalAvgPool(x))
    }

    /// Affine map on `N x C x 1 x 1` input. `w` holds `out x C` values
    /// (shape `out x C x 1 x 1`), `b` holds `out`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        let ws = self.shape(w);
        if s.h != 1 || s.w != 1 {
            return Err(ScanetError::shape("fully_connected", format!("input {s} is not spatially 1x1")));
        }
        if ws.c * ws.h * ws.w != s.c {
            return Err(ScanetError::shape("fully_connected", format!("weight {ws} for input {s}")));
        }
        if self.value(b).numel() != ws.n {
            return Err(ScanetError::shape("fully_connected", format!("bias {} for weight {ws}", self.shape(b))));
        }
        self.flops += (2 * s.n * ws.n * s.c + s.n * ws.n) as u64;
        let k = FcKernel { n: s.n, c: s.c, outs: ws.n };
        self.record(&[x, w, b], Shape::new(s.n, ws.n, 1, 1), &k, Op::FullyConnected { x, w, b })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        self.flops += self.value(x).numel() as u64;
        self.record(&[x], Shape::scalar(), &SumKernel, Op::Sum(x)).expect("scalar output")
    }

    /// Records an externally defined operation.
    pub fn custom(&mut self, inputs: &[Var], shape: Shape, rule: Box<dyn CustomOp>) -> Result<Var> {
        let widened: Vec<Vec<f64>> = inputs.iter().map(|&v| self.value_f64(v)).collect();
        let refs: Vec<&[f64]> = widened.iter().map(Vec::as_slice).collect();
        let out = rule.forward(&refs);
        if out.len() != shape.numel() {
            return Err(ScanetError::shape("custom", format!("{} values for {shape}", out.len())));
        }
        self.flops += out.len() as u64;
        let needs = inputs.iter().any(|&v| self.needs(v));
        let op = Op::Custom { inputs: inputs.to_vec(), rule };
        if self.precision == Precision::F64 {
            self.push_exact(shape, out, op, needs)
        } else {
            let t = Tensor::from_vec(shape, out.iter().map(|&v| v as f32).collect())?;
            Ok(self.push(t, op, needs))
        }
    }

    /// Backpropagates from a scalar, accumulating into the gradient slot of
    /// every leaf that requires one. Calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, &[1.0])
    }

    /// Like [`Tape::backward`] but seeds an arbitrary upstream gradient,
    /// so `loss` need not be scalar.
    pub fn backward_with(&mut self, root: Var, seed: &[f32]) -> Result<()> {
        let rs = self.shape(root);
        if seed.len() != rs.numel() {
            return Err(ScanetError::shape(
                "backward",
                format!("root {rs} seeded with {} values; backward needs a scalar loss", seed.len()),
            ));
        }
        if self.precision == Precision::F64 {
            let seed = seed.iter().map(|&v| v as f64).collect();
            for (idx, g) in self.propagate::<f64>(root, seed) {
                let node = &mut self.nodes[idx];
                node.value.accumulate_grad(&g.iter().map(|&v| v as f32).collect::<Vec<_>>())?;
                match &mut node.exact_grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        } else {
            for (idx, g) in self.propagate::<f32>(root, seed.to_vec()) {
                self.nodes[idx].value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// Gradient of a leaf in `f64`: exact on an `f64` tape, widened otherwise.
    pub fn grad_f64(&self, v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        match &node.exact_grad {
            Some(g) => Some(g.clone()),
            None => node.value.grad().map(|g| g.iter().map(|&x| x as f64).collect()),
        }
    }

    /// Reverse sweep; returns the gradient of every leaf that requires one.
    fn propagate<T: TapeReal>(&self, root: Var, seed: Vec<T>) -> Vec<(usize, Vec<T>)> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);
        let mut leaves = Vec::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.value.requires_grad() {
                    leaves.push((idx, g));
                }
                continue;
            }
            for (var, contribution) in self.local_grads(idx, &g) {
                if !self.needs(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(contribution),
                }
            }
        }
        leaves
    }

    fn local_grads<T: TapeReal>(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| T::values(&self.nodes[v.0]);
        let shape = |v: Var| self.shape(v);
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, p } => {
                let (xs, ws, os) = (shape(*x), shape(*w), node.value.shape());
                let mut out = Vec::with_capacity(3);
                if self.needs(*x) {
                    out.push((*x, kernels::conv2d_grad_input(g, os, val(*w), ws, xs, *p)));
                }
                if self.needs(*w) {
                    out.push((*w, kernels::conv2d_grad_weight(g, os, val(*x), xs, ws, *p)));
                }
                if let Some(b) = b {
                    out.push((*b, kernels::conv2d_grad_bias(g, os)));
                }
                out
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, training } => {
                let s = node.value.shape();
                let plane = s.plane();
                let count = (s.n * plane) as f64;
                let (xd, gm) = (val(*x), val(*gamma));
                let mut dgamma = vec![T::zero(); s.c];
                let mut dbeta = vec![T::zero(); s.c];
                let mut dx = vec![T::zero(); s.numel()];
                for c in 0..s.c {
                    let xhat = |i: usize| (xd[i].f64() - mean[c]) * inv_std[c];
                    let (mut sg, mut sgx) = (0f64, 0f64);
                    for n in 0..s.n {
                        let base = (n * s.c + c) * plane;
                        for i in base..base + plane {
                            sg += g[i].f64();
                            sgx += g[i].f64() * xhat(i);
                        }
                    }
                    dgamma[c] = T::of(sgx);
                    dbeta[c] = T::of(sg);
                    let k = gm[c].f64() * inv_std[c];
                    for n in 0..s.n {
                        let base = (n * s.c + c) * plane;
                        for i in base..base + plane {
                            let gi = g[i].f64();
                            dx[i] = T::of(if *training { k * (gi - sg / count - xhat(i) * sgx / count) } else { k * gi });
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu(x) => {
                let dx = g.iter().zip(val(*x)).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                vec![(*x, dx)]
            }
            Op::Relu6(x) => {
                let six = T::of(6.0);
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() && v < six { g } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let y = T::values(node);
                vec![(*x, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect())]
            }
            Op::OneMinus(x) => vec![(*x, g.iter().map(|&g| -g).collect())],
            Op::Scale { a, k } => {
                let k = T::of(*k as f64);
                vec![(*a, g.iter().map(|&g| g * k).collect())]
            }
            Op::Upsample { x, factor } => vec![(*x, kernels::upsample_backward(g, shape(*x), *factor))],
            Op::Add { a, b } => {
                let db = reduce_broadcast(g, shape(*a), shape(*b), |g, _| g);
                vec![(*a, g.to_vec()), (*b, db)]
            }
            Op::Mul { a, b } => {
                let (sa, sb) = (shape(*a), shape(*b));
                let (ad, bd) = (val(*a), val(*b));
                let plane = sa.plane();
                let mut da = vec![T::zero(); sa.numel()];
                for n in 0..sa.n {
                    for c in 0..sa.c {
                        let base = (n * sa.c + c) * plane;
                        let bbase = if sb.c == 1 { n * plane } else { base };
                        for i in 0..plane {
                            da[base + i] = g[base + i] * bd[bbase + i];
                        }
                    }
                }
                let db = reduce_broadcast(g, sa, sb, |g, i| g * ad[i]);
                vec![(*a, da), (*b, db)]
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (shape(*a), shape(*b));
                let plane = sa.plane();
                let (mut da, mut db) = (Vec::with_capacity(sa.numel()), Vec::with_capacity(sb.numel()));
                let stride = (sa.c + sb.c) * plane;
                for n in 0..sa.n {
                    da.extend_from_slice(&g[n * stride..n * stride + sa.c * plane]);
                    db.extend_from_slice(&g[n * stride + sa.c * plane..(n + 1) * stride]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::GlobalAvgPool(x) => {
                let s = shape(*x);
                let plane = s.plane();
                let inv = T::of(1.0 / plane as f64);
                let mut dx = vec![T::zero(); s.numel()];
                for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = g[i] * inv);
                }
                vec![(*x, dx)]
            }
            Op::FullyConnected { x, w, b } => {
                let s = shape(*x);
                let outs = shape(*w).n;
                let (xd, wd) = (val(*x), val(*w));
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wd.len()];
                let mut db = vec![T::zero(); outs];
                for n in 0..s.n {
                    for o in 0..outs {
                        let go = g[n * outs + o];
                        db[o] += go;
                        for c in 0..s.c {
                            dw[o * s.c + c] += go * xd[n * s.c + c];
                            dx[n * s.c + c] += go * wd[o * s.c + c];
                        }
                    }
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Custom { inputs, rule } => {
                let widen = |v: &[T]| v.iter().map(|x| x.f64()).collect::<Vec<f64>>();
                let ins: Vec<Vec<f64>> = inputs.iter().map(|&v| widen(val(v))).collect();
                let refs: Vec<&[f64]> = ins.iter().map(Vec::as_slice).collect();
                rule.backward(&refs, &widen(T::values(node)), &widen(g))
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(g, &v)| g.map(|g| (v, g.into_iter().map(T::of).collect())))
                    .collect()
            }
        }
    }
}

/// Element type the tape can backpropagate in.
trait TapeReal: Real {
    fn values(node: &Node) -> &[Self];
}

impl TapeReal for f32 {
    fn values(node: &Node) -> &[f32] {
        node.value.data()
    }
}

impl TapeReal for f64 {
    fn values(node: &Node) -> &[f64] {
        node.exact.as_deref().expect("f64 tape nodes carry exact values")
    }
}

/// Gradient for the `b` operand of a broadcasting binary op. `term(g, i)`
/// maps the upstream gradient at flat index `i` of the output to the
/// contribution for `b`.
fn reduce_broadcast<T: Real>(g: &[T], sa: Shape, sb: Shape, term: impl Fn(T, usize) -> T) -> Vec<T> {
    if sa == sb {
        return g.iter().enumerate().map(|(i, &g)| term(g, i)).collect();
    }
    let plane = sa.plane();
    let mut db = vec![T::zero(); sb.numel()];
    for n in 0..sa.n {
        for c in 0..sa.c {
            let base = (n * sa.c + c) * plane;
            for i in 0..plane {
                db[n * plane + i] += term(g[base + i], base + i);
            }
        }
    }
    db
}

/// Logistic function evaluated in `f64`, kept strictly inside `(0, 1)` in `f32`.
fn sigmoid_t<T: Real>(v: T) -> T {
    let v = v.f64();
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    T::of(s.clamp(f32::MIN_POSITIVE as f64, 1.0 - f32::EPSILON as f64 / 2.0))
}
