//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::float::Float;
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Catalogue of differentiable primitives accepted by [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    MatMul,
    Conv2d { stride: usize, padding: usize },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Add,
    Sub,
    Mul,
    Div,
    Flatten,
    Dropout { rate: f64 },
    Softmax,
    Sigmoid,
    Log,
    ReduceSum,
    ReduceMean,
    /// Adds a per-channel bias `b[C]` along axis 1 of `x[N, C, ...]`.
    BiasAdd,
    Scale(f64),
    ClampMin(f64),
    /// Identity forward; multiplies the upstream gradient by `-lambda`.
    GradientReversal { lambda: f64 },
    /// Elementwise stable binary cross-entropy of logits `z` against
    /// constant targets `d`.
    BceWithLogits,
    Detach,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::MaxPool2d { .. } => "max_pool2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Flatten => "flatten",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Softmax => "softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Log => "log",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::BiasAdd => "bias_add",
            Primitive::Scale(_) => "scale",
            Primitive::ClampMin(_) => "clamp_min",
            Primitive::GradientReversal { .. } => "gradient_reversal",
            Primitive::BceWithLogits => "bce_with_logits",
            Primitive::Detach => "detach",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Conv2d { .. }
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::BiasAdd
            | Primitive::BceWithLogits => 2,
            _ => 1,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeometry, cols: Vec<T> },
    Relu { x: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: usize, spatial: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Reshape { x: usize },
    Dropout { x: usize, mask: Vec<T> },
    Softmax { x: usize, row: usize },
    Sigmoid { x: usize },
    Log { x: usize },
    ReduceSum { x: usize },
    ReduceMean { x: usize },
    BiasAdd { x: usize, b: usize, channels: usize, inner: usize },
    Scale { x: usize, c: T },
    ClampMin { x: usize, min: T },
    Reversal { x: usize, lambda: T },
    Bce { z: usize, d: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf variable.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_leaf: BTreeMap<Var, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.by_leaf.iter().map(|(v, t)| (*v, t))
    }
}

/// A single forward pass worth of recorded operations.
///
/// Confined to one thread; independent graphs can live on different threads.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    retain: bool,
    consumed: bool,
}

impl<T: Float> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// Dropout masks draw from a generator seeded here.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            retain: false,
            consumed: false,
        }
    }

    /// Keep saved contexts after backward so it can run again.
    pub fn set_retain_graph(&mut self, retain: bool) {
        self.retain = retain;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn data(&self, v: usize) -> &[T] {
        self.nodes[v].value.data()
    }

    /// Applies `prim` to `inputs`, recording a node when any input requires grad.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let name = prim.name();
        if inputs.len() != prim.arity() {
            return Err(TensorError::InvalidAttribute {
                op: name,
                detail: format!("expected {} inputs, got {}", prim.arity(), inputs.len()),
            });
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(TensorError::InvalidAttribute {
                op: name,
                detail: format!("unknown variable #{}", bad.0),
            });
        }
        let x = inputs[0].0;
        let y = inputs.get(1).map(|v| v.0).unwrap_or(x);
        match prim {
            Primitive::MatMul => self.matmul_impl(x, y),
            Primitive::Conv2d { stride, padding } => self.conv2d_impl(x, y, stride, padding),
            Primitive::Relu => {
                let v = self.nodes[x].value.map(|a| if a > T::zero() { a } else { T::zero() });
                let rg = self.rg(x);
                self.push(name, v, Op::Relu { x }, rg)
            }
            Primitive::MaxPool2d { kernel, stride } => self.max_pool_impl(x, kernel, stride),
            Primitive::GlobalAvgPool => {
                let s = self.shape(inputs[0]).to_vec();
                if s.len() != 4 {
                    return Err(shape_err(name, format!("expected N×C×H×W, got {s:?}")));
                }
                let spatial = s[2] * s[3];
                let inv = T::from_f64(1.0 / spatial as f64);
                let out: Vec<T> = self
                    .data(x)
                    .chunks(spatial)
                    .map(|p| p.iter().copied().sum::<T>() * inv)
                    .collect();
                let rg = self.rg(x);
                self.push(name, Tensor::new(vec![s[0], s[1]], out)?, Op::GlobalAvgPool { x, spatial }, rg)
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => self.binary_impl(prim, x, y),
            Primitive::Flatten => {
                let s = self.shape(inputs[0]).to_vec();
                if s.is_empty() {
                    return Err(shape_err(name, "cannot flatten a scalar"));
                }
                let rest = numel(&s[1..]);
                let v = self.nodes[x].value.clone().reshape(vec![s[0], rest])?;
                let rg = self.rg(x);
                self.push(name, v, Op::Reshape { x }, rg)
            }
            Primitive::Dropout { rate } => self.dropout_impl(x, rate),
            Primitive::Softmax => self.softmax_impl(x),
            Primitive::Sigmoid => {
                let v = self.nodes[x].value.map(sigmoid);
                let rg = self.rg(x);
                self.push(name, v, Op::Sigmoid { x }, rg)
            }
            Primitive::Log => {
                let v = self.nodes[x].value.map(|a| a.ln());
                let rg = self.rg(x);
                self.push(name, v, Op::Log { x }, rg)
            }
            Primitive::ReduceSum => {
                let s = self.data(x).iter().copied().sum::<T>();
                let rg = self.rg(x);
                self.push(name, Tensor::scalar(s), Op::ReduceSum { x }, rg)
            }
            Primitive::ReduceMean => {
                let n = self.data(x).len();
                if n == 0 {
                    return Err(shape_err(name, "mean of an empty tensor"));
                }
                let s = self.data(x).iter().copied().sum::<T>() / T::from_f64(n as f64);
                let rg = self.rg(x);
                self.push(name, Tensor::scalar(s), Op::ReduceMean { x }, rg)
            }
            Primitive::BiasAdd => self.bias_add_impl(x, y),
            Primitive::Scale(c) => {
                let c = T::from_f64(c);
                let v = self.nodes[x].value.map(|a| a * c);
                let rg = self.rg(x);
                self.push(name, v, Op::Scale { x, c }, rg)
            }
            Primitive::ClampMin(min) => {
                let min = T::from_f64(min);
                let v = self.nodes[x].value.map(|a| if a > min { a } else { min });
                let rg = self.rg(x);
                self.push(name, v, Op::ClampMin { x, min }, rg)
            }
            Primitive::GradientReversal { lambda } => {
                if !(lambda >= 0.0) || !lambda.is_finite() {
                    return Err(TensorError::NegativeLambda(lambda));
                }
                let v = self.nodes[x].value.clone();
                let rg = self.rg(x);
                self.push(name, v, Op::Reversal { x, lambda: T::from_f64(lambda) }, rg)
            }
            Primitive::BceWithLogits => {
                if self.shape(inputs[0]) != self.shape(inputs[1]) {
                    return Err(shape_err(
                        name,
                        format!("logits {:?} vs targets {:?}", self.shape(inputs[0]), self.shape(inputs[1])),
                    ));
                }
                let out: Vec<T> = self
                    .data(x)
                    .iter()
                    .zip(self.data(y))
                    .map(|(&z, &d)| {
                        let zero = T::zero();
                        let pos = if z > zero { z } else { zero };
                        pos - z * d + (T::one() + (-z.abs()).exp()).ln()
                    })
                    .collect();
                let shape = self.shape(inputs[0]).to_vec();
                let rg = self.rg(x);
                self.push(name, Tensor::new(shape, out)?, Op::Bce { z: x, d: y }, rg)
            }
            Primitive::Detach => {
                let v = self.nodes[x].value.clone();
                self.push(name, v, Op::Leaf, false)
            }
        }
    }

    fn matmul_impl(&mut self, a: usize, b: usize) -> Result<Var> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), k as isize, 1, self.data(b), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg)
    }

    fn conv2d_impl(&mut self, x: usize, w: usize, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.nodes[x].value.shape().to_vec(), self.nodes[w].value.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}: both must be 4-d")));
        }
        if sw[1] != sx[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but kernel expects {}", sx[1], sw[1]),
            ));
        }
        if stride == 0 {
            return Err(TensorError::InvalidAttribute { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        if sw[2] > sx[2] + 2 * padding || sw[3] > sx[3] + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}×{} larger than padded input {}×{}", sw[2], sw[3], sx[2] + 2 * padding, sx[3] + 2 * padding),
            ));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        let (out, cols) = kernels::conv2d_forward(self.data(x), self.data(w), &geom);
        let rg = self.rg(x) || self.rg(w);
        let shape = vec![geom.batch, geom.out_channels, geom.out_h(), geom.out_w()];
        let cols = if rg { cols } else { Vec::new() };
        self.push("conv2d", Tensor::new(shape, out)?, Op::Conv2d { x, w, geom, cols }, rg)
    }

    fn max_pool_impl(&mut self, x: usize, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.nodes[x].value.shape().to_vec();
        if s.len() != 4 {
            return Err(shape_err("max_pool2d", format!("expected N×C×H×W, got {s:?}")));
        }
        if kernel == 0 || stride == 0 {
            return Err(TensorError::InvalidAttribute { op: "max_pool2d", detail: "kernel and stride must be >= 1".into() });
        }
        if kernel > s[2] || kernel > s[3] {
            return Err(shape_err("max_pool2d", format!("kernel {kernel} exceeds spatial {}×{}", s[2], s[3])));
        }
        let (out, argmax, oh, ow) = kernels::max_pool2d_forward(self.data(x), s[0] * s[1], s[2], s[3], kernel, stride);
        let rg = self.rg(x);
        self.push("max_pool2d", Tensor::new(vec![s[0], s[1], oh, ow], out)?, Op::MaxPool2d { x, argmax }, rg)
    }

    fn binary_impl(&mut self, prim: Primitive, a: usize, b: usize) -> Result<Var> {
        let name = prim.name();
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.nodes[a].value.shape(), self.nodes[b].value.shape()),
            ));
        }
        let f: fn(T, T) -> T = match prim {
            Primitive::Add => |p, q| p + q,
            Primitive::Sub => |p, q| p - q,
            Primitive::Mul => |p, q| p * q,
            _ => |p, q| p / q,
        };
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| f(p, q)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let op = match prim {
            Primitive::Add => Op::Add { a, b },
            Primitive::Sub => Op::Sub { a, b },
            Primitive::Mul => Op::Mul { a, b },
            _ => Op::Div { a, b },
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::new(shape, out)?, op, rg)
    }

    fn dropout_impl(&mut self, x: usize, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidAttribute {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(Var(x));
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let n = self.data(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() >= rate { scale } else { T::zero() })
            .collect();
        let out: Vec<T> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let rg = self.rg(x);
        let mask = if rg { mask } else { Vec::new() };
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout { x, mask }, rg)
    }

    fn softmax_impl(&mut self, x: usize) -> Result<Var> {
        let shape = self.nodes[x].value.shape().to_vec();
        let row = *shape.last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        if row == 0 {
            return Err(shape_err("softmax", "empty last axis"));
        }
        let mut out = Vec::with_capacity(self.data(x).len());
        for r in self.data(x).chunks(row) {
            let mx = r.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in r {
                let e = (v - mx).exp();
                total += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x, row }, rg)
    }

    fn bias_add_impl(&mut self, x: usize, b: usize) -> Result<Var> {
        let sx = self.nodes[x].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(shape_err("bias_add", format!("input {sx:?}, bias {sb:?}")));
        }
        let channels = sx[1];
        let inner = numel(&sx[2..]);
        let bias = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let c = bias[i % channels];
            for v in chunk {
                *v += c;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push("bias_add", Tensor::new(sx, out)?, Op::BiasAdd { x, b, channels, inner }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.apply(Primitive::MaxPool2d { kernel, stride }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Flatten, &[x])
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.apply(Primitive::Dropout { rate }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::ReduceSum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::ReduceMean, &[x])
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::BiasAdd, &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        self.apply(Primitive::ClampMin(min), &[x])
    }

    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Result<Var> {
        self.apply(Primitive::GradientReversal { lambda }, &[x])
    }

    pub fn bce_with_logits(&mut self, z: Var, targets: Var) -> Result<Var> {
        self.apply(Primitive::BceWithLogits, &[z, targets])
    }

    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Detach, &[x])
    }

    /// Affine map `x @ w + b` for `x[N, in]`, `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.bias_add(h, b)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` gets an entry, zero-filled
    /// when no path reaches it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut by_leaf = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    by_leaf.insert(Var(i), Tensor::zeros(self.nodes[i].value.shape()));
                }
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                by_leaf.insert(Var(i), Tensor::new(self.nodes[i].value.shape().to_vec(), dy)?);
                continue;
            }
            self.propagate(i, &dy, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                by_leaf.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        for (v, g) in by_leaf.iter() {
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient { index: v.0 });
            }
        }
        if !self.retain {
            self.consumed = true;
            for node in &mut self.nodes {
                match &mut node.op {
                    Op::Conv2d { cols, .. } => *cols = Vec::new(),
                    Op::Dropout { mask, .. } => *mask = Vec::new(),
                    Op::MaxPool2d { argmax, .. } => *argmax = Vec::new(),
                    _ => {}
                }
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], idx: usize, g: Vec<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dY @ Bᵀ
                    T::gemm(m, n, k, dy, n as isize, 1, self.data(b), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    // dB = Aᵀ @ dY
                    T::gemm(k, m, n, self.data(a), 1, k as isize, dy, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    self.accumulate(grads, b, db);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (dx, dw) = kernels::conv2d_backward(dy, self.data(*w), cols, geom, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Relu { x } => {
                let g = self
                    .data(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut g = vec![T::zero(); self.data(*x).len()];
                for (&src, &d) in argmax.iter().zip(dy) {
                    g[src] += d;
                }
                self.accumulate(grads, *x, g);
            }
            Op::GlobalAvgPool { x, spatial } => {
                let inv = T::from_f64(1.0 / *spatial as f64);
                let mut g = Vec::with_capacity(dy.len() * spatial);
                for &d in dy {
                    g.extend(std::iter::repeat_n(d * inv, *spatial));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.iter().map(|&d| -d).collect());
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let g = dy.iter().zip(self.data(*b)).map(|(&d, &q)| d * q).collect();
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = dy.iter().zip(self.data(*a)).map(|(&d, &p)| d * p).collect();
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Div { a, b } => {
                let bv = self.data(*b);
                if self.rg(*a) {
                    let g = dy.iter().zip(bv).map(|(&d, &q)| d / q).collect();
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = dy
                        .iter()
                        .zip(self.data(*a))
                        .zip(bv)
                        .map(|((&d, &p), &q)| -d * p / (q * q))
                        .collect();
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, dy.to_vec()),
            Op::Dropout { x, mask } => {
                let g = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Softmax { x, row } => {
                let mut g = Vec::with_capacity(dy.len());
                for (yr, dr) in y.chunks(*row).zip(dy.chunks(*row)) {
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    g.extend(yr.iter().zip(dr).map(|(&p, &d)| p * (d - dot)));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid { x } => {
                let g = y.iter().zip(dy).map(|(&s, &d)| d * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Log { x } => {
                let g = self.data(*x).iter().zip(dy).map(|(&v, &d)| d / v).collect();
                self.accumulate(grads, *x, g);
            }
            Op::ReduceSum { x } => {
                let n = self.data(*x).len();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::ReduceMean { x } => {
                let n = self.data(*x).len();
                let v = dy[0] / T::from_f64(n as f64);
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::BiasAdd { x, b, channels, inner } => {
                if self.rg(*b) {
                    let mut db = vec![T::zero(); *channels];
                    for (i, chunk) in dy.chunks(*inner).enumerate() {
                        db[i % channels] += chunk.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, dy.to_vec());
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, dy.iter().map(|&d| d * *c).collect());
            }
            Op::ClampMin { x, min } => {
                let g = self
                    .data(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > *min { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Reversal { x, lambda } => {
                let neg = -*lambda;
                self.accumulate(grads, *x, dy.iter().map(|&d| d * neg).collect());
            }
            Op::Bce { z, d } => {
                let g = self
                    .data(*z)
                    .iter()
                    .zip(self.data(*d))
                    .zip(dy)
                    .map(|((&zv, &dv), &up)| up * (sigmoid(zv) - dv))
                    .collect();
                self.accumulate(grads, *z, g);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
