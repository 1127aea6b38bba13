//! Parameter storage and the reusable convolutional blocks.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, ScanetError};
use crate::tensor::{cast_f16_roundtrip, BatchNormParams, ConvParams, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Learnable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    kind: ParamKind,
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    fn insert(&mut self, name: &str, mut tensor: Tensor, kind: ParamKind) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(ScanetError::invalid(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(kind == ParamKind::Learnable);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), tensor, kind });
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert(name, tensor, ParamKind::Learnable)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert(name, tensor, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| ScanetError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(ScanetError::UnknownParam(name.to_string())),
        }
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.index.get(name).map(|&i| self.entries[i].kind)
    }

    /// All entries, learnable and buffers, in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamKind)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor, e.kind))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, ParamKind)> {
        self.entries.iter_mut().map(|e| (e.name.as_str(), &mut e.tensor, e.kind))
    }

    pub fn learnable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|e| e.2 == ParamKind::Learnable).map(|(n, t, _)| (n, t))
    }

    /// Number of learnable scalars; buffers are not counted.
    pub fn param_count(&self) -> usize {
        self.learnable().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Copies every entry whose name also exists in `other` (with the same
    /// shape) from `other`. Returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Ok(src) = other.get(&e.name) {
                if src.shape() != e.tensor.shape() {
                    return Err(ScanetError::shape(
                        "load_matching",
                        format!("`{}` is {} here but {} in the source", e.name, e.tensor.shape(), src.shape()),
                    ));
                }
                e.tensor.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Store with the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            out.insert(&e.name, e.tensor.clone(), e.kind).expect("names are unique");
        }
        out
    }

    /// Rounds every entry through binary16 in place.
    pub fn cast_f16(&mut self) {
        for e in &mut self.entries {
            let rounded = cast_f16_roundtrip(&e.tensor);
            e.tensor.data_mut().copy_from_slice(rounded.data());
        }
    }
}

/// One forward pass: a tape plus lazily bound parameters from a store.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: HashMap<String, Var>,
    training: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, training: bool) -> Self {
        Session { tape: Tape::new(), store, bound: HashMap::new(), training }
    }

    /// Inference session that rounds every value through binary16.
    pub fn fp16(store: &'a mut ParamStore) -> Self {
        Session { tape: Tape::fp16(), store, bound: HashMap::new(), training: false }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Records a learnable tensor on the tape the first time it is asked for.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let mut t = self.store.get(name)?.clone();
        t.clear_grad();
        let v = if self.training { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes `name` resolve to an existing tape value instead of the stored tensor.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Batch norm with `{prefix}.gamma/beta` and running-stat buffers.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mut mean = self.store.get(&mean_name)?.data().to_vec();
        let mut var = self.store.get(&var_name)?.data().to_vec();
        let out = self.tape.batch_norm(x, gamma, beta, &mut mean, &mut var, BatchNormParams::new(self.training))?;
        if self.training {
            self.store.get_mut(&mean_name)?.data_mut().copy_from_slice(&mean);
            self.store.get_mut(&var_name)?.data_mut().copy_from_slice(&var);
        }
        Ok(out)
    }

    /// Backpropagates `loss` and accumulates gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)?;
        for (name, &v) in &self.bound {
            if let Some(g) = self.tape.grad(v) {
                self.store.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Uniform `±1/sqrt(fan_in)` initialisation.
fn uniform_init(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Relu6,
}

fn activate(s: &mut Session, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => s.tape.relu(x),
        Activation::Relu6 => s.tape.relu6(x),
    }
}

fn check_channels(s: &Session, x: Var, expected: usize, who: &str) -> Result<()> {
    let c = s.tape.shape(x).c;
    if c != expected {
        return Err(ScanetError::Shape {
            op: "block",
            detail: format!("{who} expects {expected} input channels, got {c}"),
        });
    }
    Ok(())
}

/// Square convolution with "same" padding, optionally biased.
#[derive(Clone, Debug)]
pub struct Conv {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv { prefix: prefix.into(), in_channels, out_channels, kernel, stride: 1, groups: 1, bias: true }
    }

    fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let ws = self.weight_shape();
        store.add_param(&format!("{}.weight", self.prefix), uniform_init(ws, ws.c * ws.h * ws.w, rng))?;
        if self.bias {
            store.add_param(&format!("{}.bias", self.prefix), Tensor::zeros(Shape::new(1, self.out_channels, 1, 1)))?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        check_channels(s, x, self.in_channels, &self.prefix)?;
        let w = s.param(&format!("{}.weight", self.prefix))?;
        let b = if self.bias { Some(s.param(&format!("{}.bias", self.prefix))?) } else { None };
        let p = ConvParams::new(self.stride, self.kernel / 2, self.groups);
        s.tape.conv2d(x, w, b, p)
    }
}

/// Convolution (no bias) → batch norm → activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub act: Activation,
}

impl ConvBnAct {
    pub fn new(
        prefix: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: Activation,
    ) -> Self {
        let conv = Conv { prefix: prefix.into(), in_channels, out_channels, kernel, stride, groups, bias: false };
        ConvBnAct { conv, act }
    }

    /// The plain 3x3-conv / batch-norm / ReLU unit.
    pub fn conv_bn_relu(prefix: impl Into<String>, spec: &BlockSpec) -> Self {
        ConvBnAct::new(prefix, spec.in_channels, spec.out_channels, spec.kernel_size, spec.stride, 1, Activation::Relu)
    }

    fn bn_prefix(&self) -> String {
        format!("{}.bn", self.conv.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv.register(store, rng)?;
        let c = Shape::new(1, self.conv.out_channels, 1, 1);
        let bn = self.bn_prefix();
        store.add_param(&format!("{bn}.gamma"), Tensor::ones(c))?;
        store.add_param(&format!("{bn}.beta"), Tensor::zeros(c))?;
        store.add_buffer(&format!("{bn}.running_mean"), Tensor::zeros(c))?;
        store.add_buffer(&format!("{bn}.running_var"), Tensor::ones(c))?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.conv.out_channels
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = s.batch_norm(y, &self.bn_prefix())?;
        Ok(activate(s, y, self.act))
    }
}

/// Geometry of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expansion_ratio: usize,
    pub kernel_size: usize,
}

impl BlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, expansion_ratio: usize) -> Self {
        BlockSpec { in_channels, out_channels, stride, expansion_ratio, kernel_size: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 || self.kernel_size == 0 {
            return Err(ScanetError::invalid(format!("block spec must be positive: {self:?}")));
        }
        if self.expansion_ratio < 1 {
            return Err(ScanetError::invalid(format!("expansion ratio must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.in_channels * self.expansion_ratio
    }
}

/// Intermediate values of one inverted-residual forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ResidualTrace {
    pub expanded: Var,
    pub depthwise: Var,
    pub branch: Var,
    pub output: Var,
}

/// Expand (1x1, ReLU6) → depthwise (kxk, ReLU6) → linear 1x1 projection,
/// with an identity shortcut when stride is 1 and widths match.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub spec: BlockSpec,
    pub expand: ConvBnAct,
    pub depthwise: ConvBnAct,
    pub project: ConvBnAct,
}

impl InvertedResidual {
    pub fn new(prefix: &str, spec: BlockSpec) -> Result<Self> {
        spec.validate()?;
        let hidden = spec.hidden();
        Ok(InvertedResidual {
            spec,
            expand: ConvBnAct::new(format!("{prefix}.expand"), spec.in_channels, hidden, 1, 1, 1, Activation::Relu6),
            depthwise: ConvBnAct::new(
                format!("{prefix}.depthwise"),
                hidden,
                hidden,
                spec.kernel_size,
                spec.stride,
                hidden,
                Activation::Relu6,
            ),
            project: ConvBnAct::new(
                format!("{prefix}.project"),
                hidden,
                spec.out_channels,
                1,
                1,
                1,
                Activation::Identity,
            ),
        })
    }

    pub fn has_shortcut(&self) -> bool {
        self.spec.stride == 1 && self.spec.in_channels == self.spec.out_channels
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.expand.register(store, rng)?;
        self.depthwise.register(store, rng)?;
        self.project.register(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.depthwise.param_count() + self.project.param_count()
    }

    pub fn forward_traced(&self, s: &mut Session, x: Var) -> Result<ResidualTrace> {
        check_channels(s, x, self.spec.in_channels, "inverted residual")?;
        let expanded = self.expand.forward(s, x)?;
        let depthwise = self.depthwise.forward(s, expanded)?;
        let branch = self.project.forward(s, depthwise)?;
        let output = if self.has_shortcut() { s.tape.add(branch, x)? } else { branch };
        Ok(ResidualTrace { expanded, depthwise, branch, output })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.forward_traced(s, x)?.output)
    }
}

/// Stride-1 inverted residual followed by 2x bilinear upsampling.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub residual: InvertedResidual,
}

impl UpsampleBlock {
    pub fn new(prefix: &str, spec: BlockSpec) -> Result<Self> {
        let spec = BlockSpec { stride: 1, ..spec };
        Ok(UpsampleBlock { residual: InvertedResidual::new(prefix, spec)? })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.residual.register(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.residual.param_count()
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.residual.forward(s, x)?;
        s.tape.upsample_bilinear(y, 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_report;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Counts parameters from the layer list written out by hand:
    /// conv weights (out * in/groups * k * k) plus gamma and beta per channel.
    fn analytic_ir_count(spec: BlockSpec) -> usize {
        let h = spec.hidden();
        let k = spec.kernel_size;
        (spec.in_channels * h + 2 * h) + (h * k * k + 2 * h) + (h * spec.out_channels + 2 * spec.out_channels)
    }

    #[test]
    fn store_rejects_duplicates_and_counts_learnable_only() {
        let mut st = ParamStore::new();
        assert_eq!(st.param_count(), 0);
        st.add_param("w", Tensor::zeros(Shape::new(8, 4, 3, 3))).unwrap();
        st.add_buffer("rm", Tensor::zeros(Shape::new(1, 8, 1, 1))).unwrap();
        assert!(st.add_param("w", Tensor::zeros(Shape::new(1, 1, 1, 1))).is_err());
        assert_eq!(st.param_count(), 288);
        assert!(st.get("w").unwrap().requires_grad());
        assert!(!st.get("rm").unwrap().requires_grad());
        let names: Vec<&str> = st.iter().map(|e| e.0).collect();
        assert_eq!(names, ["w", "rm"]);
    }

    #[test]
    fn conv_bn_relu_zero_and_stride() {
        let spec = BlockSpec::new(3, 5, 2, 1);
        let block = ConvBnAct::conv_bn_relu("c", &spec);
        let mut st = ParamStore::new();
        block.register(&mut st, &mut rng(0)).unwrap();
        let mut s = Session::new(&mut st, false);
        let x = s.input(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), Shape::new(1, 5, 4, 4));
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
        let bad = s.input(Tensor::zeros(Shape::new(1, 4, 8, 8)));
        assert!(block.forward(&mut s, bad).is_err());
    }

    /// Max relative error of a block check; also asserts that kink
    /// crossings left most coordinates checked.
    fn block_gradcheck<F>(store: &ParamStore, input: Tensor, names: &[&str], f: F) -> f64
    where
        F: Fn(&mut Session, Var) -> Result<Var>,
    {
        let mut inputs = vec![input];
        inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
        let r = finite_diff_report(
            |t, v| {
                // the perturbed parameters come in as tape values and are pre-bound
                let mut st = store.clone();
                let mut s = Session::new(&mut st, true);
                std::mem::swap(&mut s.tape, t);
                for (i, n) in names.iter().enumerate() {
                    s.bind(n, v[i + 1]);
                }
                let out = f(&mut s, v[0]);
                std::mem::swap(&mut s.tape, t);
                out
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(r.skipped * 10 <= r.checked + r.skipped, "{r:?}");
        r.max_rel_error
    }

    #[test]
    fn conv_bn_relu_gradient() {
        let spec = BlockSpec::new(3, 4, 1, 1);
        let block = ConvBnAct::conv_bn_relu("c", &spec);
        let mut st = ParamStore::new();
        block.register(&mut st, &mut rng(1)).unwrap();
        // shift beta so few pre-activations sit on the ReLU kink
        st.get_mut("c.bn.beta").unwrap().data_mut().copy_from_slice(&[0.5, -0.5, 0.7, 0.2]);
        let f = |s: &mut Session, x: Var| block.forward(s, x);
        let x = random(Shape::new(2, 3, 6, 6), 2);
        let err = block_gradcheck(&st, x, &["c.weight", "c.bn.gamma"], f);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn inverted_residual_param_count() {
        let spec = BlockSpec::new(8, 8, 1, 2);
        let ir = InvertedResidual::new("ir", spec).unwrap();
        let mut st = ParamStore::new();
        ir.register(&mut st, &mut rng(0)).unwrap();
        // (8*16 + 16*2) + (16*9 + 16*2) + (16*8 + 8*2)
        assert_eq!(st.param_count(), 480);
        assert_eq!(analytic_ir_count(spec), 480);
        assert_eq!(ir.param_count(), 480);
    }

    #[test]
    fn zeroed_branch_leaves_identity() {
        let ir = InvertedResidual::new("ir", BlockSpec::new(4, 4, 1, 2)).unwrap();
        let mut st = ParamStore::new();
        ir.register(&mut st, &mut rng(3)).unwrap();
        st.get_mut("ir.project.bn.gamma").unwrap().data_mut().fill(0.0);
        let input = random(Shape::new(1, 4, 6, 6), 4);
        let mut s = Session::new(&mut st, false);
        let x = s.input(input.clone());
        let y = ir.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), input.data());
    }

    #[test]
    fn strided_block_has_no_shortcut() {
        let ir = InvertedResidual::new("ir", BlockSpec::new(4, 4, 2, 2)).unwrap();
        assert!(!ir.has_shortcut());
        let mut st = ParamStore::new();
        ir.register(&mut st, &mut rng(5)).unwrap();
        let mut s = Session::new(&mut st, true);
        let x = s.input(random(Shape::new(2, 4, 8, 8), 6));
        let tr = ir.forward_traced(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(tr.output), Shape::new(2, 4, 4, 4));
        assert_eq!(tr.output, tr.branch);
        assert!(InvertedResidual::new("bad", BlockSpec::new(4, 4, 1, 0)).is_err());
    }

    #[test]
    fn inverted_residual_gradient() {
        let ir = InvertedResidual::new("ir", BlockSpec::new(4, 4, 1, 2)).unwrap();
        let mut st = ParamStore::new();
        ir.register(&mut st, &mut rng(7)).unwrap();
        let f = |s: &mut Session, x: Var| ir.forward(s, x);
        let x = random(Shape::new(2, 4, 5, 5), 8);
        let err = block_gradcheck(&st, x, &["ir.project.weight", "ir.project.bn.beta", "ir.expand.weight"], f);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn upsample_block_shape_and_constant() {
        let ub = UpsampleBlock::new("up", BlockSpec::new(3, 5, 1, 2)).unwrap();
        let mut st = ParamStore::new();
        ub.register(&mut st, &mut rng(9)).unwrap();
        let mut s = Session::new(&mut st, false);
        let x = s.input(random(Shape::new(1, 3, 10, 10), 10));
        let y = ub.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), Shape::new(1, 5, 20, 20));

        // constant in, identity-configured branch (shortcut only) → constant out
        let ub = UpsampleBlock::new("id", BlockSpec::new(3, 3, 1, 2)).unwrap();
        let mut st = ParamStore::new();
        ub.register(&mut st, &mut rng(11)).unwrap();
        st.get_mut("id.project.bn.gamma").unwrap().data_mut().fill(0.0);
        let mut s = Session::new(&mut st, false);
        let x = s.input(Tensor::full(Shape::new(1, 3, 4, 4), 0.75));
        let y = ub.forward(&mut s, x).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn upsample_block_gradient() {
        let ub = UpsampleBlock::new("up", BlockSpec::new(3, 4, 1, 2)).unwrap();
        let mut st = ParamStore::new();
        ub.register(&mut st, &mut rng(12)).unwrap();
        let f = |s: &mut Session, x: Var| ub.forward(s, x);
        let x = random(Shape::new(2, 3, 4, 4), 13);
        let err = block_gradcheck(&st, x, &["up.project.weight", "up.expand.bn.gamma"], f);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn session_backward_accumulates_into_store() {
        let conv = Conv::new("c", 2, 3, 3);
        let mut st = ParamStore::new();
        conv.register(&mut st, &mut rng(14)).unwrap();
        for _ in 0..2 {
            let mut s = Session::new(&mut st, true);
            let x = s.input(random(Shape::new(1, 2, 4, 4), 15));
            let y = conv.forward(&mut s, x).unwrap();
            let l = s.tape.sum(y);
            s.backward(l).unwrap();
        }
        // bias gradient of sum(y) is the number of output pixels, twice
        assert!(st.get("c.bias").unwrap().grad().unwrap().iter().all(|&g| g == 32.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn shortcut_output_is_branch_plus_input(seed in 0u64..10_000, c in 1usize..5, e in 1usize..4) {
            let ir = InvertedResidual::new("ir", BlockSpec::new(c, c, 1, e)).unwrap();
            let mut st = ParamStore::new();
            ir.register(&mut st, &mut rng(seed)).unwrap();
            let input = random(Shape::new(2, c, 5, 5), seed + 1);
            let mut s = Session::new(&mut st, true);
            let x = s.input(input.clone());
            let tr = ir.forward_traced(&mut s, x).unwrap();
            let out = s.value(tr.output).data();
            let br = s.value(tr.branch).data();
            for i in 0..out.len() {
                prop_assert_eq!(out[i], br[i] + input.data()[i]);
            }
            // every ReLU6 activation is bounded
            for v in [tr.expanded, tr.depthwise] {
                prop_assert!(s.value(v).data().iter().all(|&a| (0.0..=6.0).contains(&a)));
            }
        }

        #[test]
        fn param_count_matches_formula(cin in 1usize..12, cout in 1usize..12, e in 1usize..7, k in prop::sample::select(vec![1usize, 3, 5])) {
            let spec = BlockSpec { in_channels: cin, out_channels: cout, stride: 1, expansion_ratio: e, kernel_size: k };
            let ir = InvertedResidual::new("ir", spec).unwrap();
            let mut st = ParamStore::new();
            ir.register(&mut st, &mut rng(0)).unwrap();
            prop_assert_eq!(st.param_count(), analytic_ir_count(spec));
        }
    }
}
