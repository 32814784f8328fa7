//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the list once in reverse, accumulating gradients into the inputs
//! that require them. Parameters are leaves registered under a dotted name.

use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;

use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation category, used for FLOP attribution and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Matmul,
    Linear,
    Softmax,
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Relu,
    LeakyRelu,
    Abs,
    Powf,
    ClampMin,
    Scale,
    AddScalar,
    MeanAxis,
    MaxAxis,
    SumAll,
    MeanAll,
    Reshape,
    Transpose,
    Concat,
    Narrow,
    PixelShuffle,
    PixelUnshuffle,
    Upsample,
    AvgPool2,
}

impl OpKind {
    pub const ALL: [OpKind; 28] = [
        OpKind::Conv2d,
        OpKind::Matmul,
        OpKind::Linear,
        OpKind::Softmax,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Abs,
        OpKind::Powf,
        OpKind::ClampMin,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MeanAxis,
        OpKind::MaxAxis,
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::PixelShuffle,
        OpKind::PixelUnshuffle,
        OpKind::Upsample,
        OpKind::AvgPool2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Softmax => "softmax_last",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Abs => "abs",
            OpKind::Powf => "powf",
            OpKind::ClampMin => "clamp_min",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MeanAxis => "mean_axis",
            OpKind::MaxAxis => "max_axis",
            OpKind::SumAll => "sum",
            OpKind::MeanAll => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose_last2",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::PixelShuffle => "pixel_shuffle",
            OpKind::PixelUnshuffle => "pixel_unshuffle",
            OpKind::Upsample => "upsample_nearest",
            OpKind::AvgPool2 => "avg_pool2",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Abs {
        x: Var,
    },
    Powf {
        x: Var,
        p: f64,
    },
    ClampMin {
        x: Var,
        lo: f64,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    PixelShuffle {
        x: Var,
        s: usize,
    },
    PixelUnshuffle {
        x: Var,
        s: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool2 {
        x: Var,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Relu { .. } => OpKind::Relu,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Abs { .. } => OpKind::Abs,
            Op::Powf { .. } => OpKind::Powf,
            Op::ClampMin { .. } => OpKind::ClampMin,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::MeanAll { .. } => OpKind::MeanAll,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::PixelShuffle { .. } => OpKind::PixelShuffle,
            Op::PixelUnshuffle { .. } => OpKind::PixelUnshuffle,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::AvgPool2 { .. } => OpKind::AvgPool2,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => {
                vec![*a, *b]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::Softmax { x }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::LeakyRelu { x, .. }
            | Op::Abs { x }
            | Op::Powf { x, .. }
            | Op::ClampMin { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::MeanAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::Reshape { x }
            | Op::Transpose { x }
            | Op::Narrow { x, .. }
            | Op::PixelShuffle { x, .. }
            | Op::PixelUnshuffle { x, .. }
            | Op::Upsample { x, .. }
            | Op::AvgPool2 { x } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Deterministic tally of arithmetic work, with optional named scopes.
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    total: u64,
    tagged: BTreeMap<&'static str, u64>,
    active: Vec<&'static str>,
}

impl FlopCounter {
    fn add(&mut self, n: u64) {
        self.total += n;
        for tag in &self.active {
            *self.tagged.entry(tag).or_default() += n;
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn tagged(&self, tag: &str) -> u64 {
        self.tagged.get(tag).copied().unwrap_or(0)
    }
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    flops: FlopCounter,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            flops: FlopCounter::default(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of `kind` (gradients scaled by 1.5).
    /// Exists so the verification suite can prove it detects a broken rule.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    /// Runs `f` with every FLOP it records also attributed to `tag`.
    pub fn scoped<R>(&mut self, tag: &'static str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.flops.active.push(tag);
        let out = f(self);
        self.flops.active.pop();
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// An input that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Registers a named parameter; repeated names return the same leaf.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn push(&mut self, op: Op, value: Tensor<T>, flops: u64) -> Result<Var> {
        let kind = op.kind();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.flops.add(flops);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn elems(&self, v: Var) -> u64 {
        self.value(v).numel() as u64
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geo = kernels::Conv2dGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        self.push(Op::Conv2d { x, w, b, stride, pad }, out, geo.flops())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let geo = kernels::MatmulGeometry::new(self.shape(a), self.shape(b))?;
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push(Op::Matmul { a, b }, out, geo.flops())
    }

    /// `x * W^T + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let flops = 2 * self.elems(x) * self.shape(w)[0] as u64;
        self.push(Op::Linear { x, w, b }, out, flops)
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_last(self.value(x))?;
        let flops = 4 * self.elems(x);
        self.push(Op::Softmax { x }, out, flops)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op.kind().name();
        let out = kernels::broadcast_binary(name, self.value(a), self.value(b), f)?;
        let flops = out.numel() as u64;
        self.push(op, out, flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add { a, b }, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub { a, b }, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul { a, b }, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div { a, b }, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(x).map(f);
        let flops = out.numel() as u64;
        self.push(op, out, flops)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid { x }, x, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu { x }, x, |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        self.unary(
            Op::LeakyRelu { x, slope },
            x,
            move |v| if v > T::zero() { v } else { v * s },
        )
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Abs { x }, x, |v| v.abs())
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let e = T::from_f64(p);
        self.unary(Op::Powf { x, p }, x, move |v| v.powf(e))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        let l = T::from_f64(lo);
        self.unary(Op::ClampMin { x, lo }, x, move |v| v.max(l))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = T::from_f64(c);
        self.unary(Op::Scale { x, c }, x, move |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = T::from_f64(c);
        self.unary(Op::AddScalar { x }, x, move |v| v + k)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keep: bool) -> Result<Var> {
        let out = kernels::mean_axis(self.value(x), axis, keep)?;
        let flops = self.elems(x);
        self.push(Op::MeanAxis { x, axis }, out, flops)
    }

    pub fn max_axis(&mut self, x: Var, axis: usize, keep: bool) -> Result<Var> {
        let (out, argmax) = kernels::max_axis(self.value(x), axis, keep)?;
        let flops = self.elems(x);
        self.push(Op::MaxAxis { x, axis, argmax }, out, flops)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let flops = self.elems(x);
        self.push(Op::SumAll { x }, out, flops)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        let flops = self.elems(x);
        self.push(Op::MeanAll { x }, out, flops)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(Op::Reshape { x }, out, 0)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() < 2 {
            return Err(Error::invalid("transpose_last2", "rank must be >= 2"));
        }
        let out = self.value(x).transpose_last2();
        self.push(Op::Transpose { x }, out, 0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat(&values, axis)?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out,
            0,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(self.value(x), axis, start, len)?;
        self.push(Op::Narrow { x, axis, start }, out, 0)
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self
            .shape(x)
            .get(axis)
            .copied()
            .ok_or_else(|| Error::invalid("split", format!("axis {} out of range", axis)))?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::invalid(
                "split",
                format!("sizes {:?} do not sum to extent {}", sizes, extent),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(x), s)?;
        self.push(Op::PixelShuffle { x, s }, out, 0)
    }

    pub fn pixel_unshuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = kernels::pixel_unshuffle(self.value(x), s)?;
        self.push(Op::PixelUnshuffle { x, s }, out, 0)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(self.value(x), factor)?;
        self.push(Op::Upsample { x, factor }, out, 0)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::avg_pool2(self.value(x))?;
        let flops = self.elems(x);
        self.push(Op::AvgPool2 { x }, out, flops)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), g);
                continue;
            }
            let mut contribs = self.local_grads(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                let k = T::from_f64(1.5);
                for (_, t) in &mut contribs {
                    *t = t.map(|v| v * k);
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients {
            grads: leaves,
            names: self.params.clone(),
        })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let y = &node.value;
        let zero = T::zero();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad)?;
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, gb));
                }
                out
            }
            Op::Matmul { a, b } => {
                let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = kernels::linear_backward(val(*x), val(*w), g)?;
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, gb));
                }
                out
            }
            Op::Softmax { x } => vec![(*x, kernels::softmax_last_backward(y, g))],
            Op::Add { a, b } => vec![
                (*a, kernels::sum_to_shape(g, val(*a).shape())),
                (*b, kernels::sum_to_shape(g, val(*b).shape())),
            ],
            Op::Sub { a, b } => vec![
                (*a, kernels::sum_to_shape(g, val(*a).shape())),
                (*b, kernels::sum_to_shape(g, val(*b).shape()).map(|v| -v)),
            ],
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, kernels::broadcast_grad(g, av, bv, av.shape(), |g, _, b| g * b)),
                    (*b, kernels::broadcast_grad(g, av, bv, bv.shape(), |g, a, _| g * a)),
                ]
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, kernels::broadcast_grad(g, av, bv, av.shape(), |g, _, b| g / b)),
                    (
                        *b,
                        kernels::broadcast_grad(g, av, bv, bv.shape(), |g, a, b| -g * a / (b * b)),
                    ),
                ]
            }
            Op::Sigmoid { x } => vec![(*x, g.zip_map(y, |g, s| g * s * (T::one() - s))?)],
            Op::Relu { x } => vec![(*x, g.zip_map(val(*x), |g, v| if v > zero { g } else { zero })?)],
            Op::LeakyRelu { x, slope } => {
                let s = T::from_f64(*slope);
                vec![(*x, g.zip_map(val(*x), |g, v| if v > zero { g } else { g * s })?)]
            }
            Op::Abs { x } => vec![(
                *x,
                g.zip_map(val(*x), |g, v| {
                    if v > zero {
                        g
                    } else if v < zero {
                        -g
                    } else {
                        zero
                    }
                })?,
            )],
            Op::Powf { x, p } => {
                let (e, em1) = (T::from_f64(*p), T::from_f64(*p - 1.0));
                vec![(*x, g.zip_map(val(*x), |g, v| g * e * v.powf(em1))?)]
            }
            Op::ClampMin { x, lo } => {
                let l = T::from_f64(*lo);
                vec![(*x, g.zip_map(val(*x), |g, v| if v > l { g } else { zero })?)]
            }
            Op::Scale { x, c } => {
                let k = T::from_f64(*c);
                vec![(*x, g.map(|v| v * k))]
            }
            Op::AddScalar { x } => vec![(*x, g.clone())],
            Op::MeanAxis { x, axis } => vec![(*x, kernels::mean_axis_backward(val(*x).shape(), *axis, g))],
            Op::MaxAxis { x, axis, argmax } => {
                vec![(*x, kernels::max_axis_backward(val(*x).shape(), *axis, argmax, g))]
            }
            Op::SumAll { x } => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item()))],
            Op::MeanAll { x } => {
                let n = T::from_f64(val(*x).numel() as f64);
                vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item() / n))]
            }
            Op::Reshape { x } => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::Transpose { x } => vec![(*x, g.transpose_last2())],
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    out.push((p, kernels::narrow(g, *axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Narrow { x, axis, start } => {
                vec![(*x, kernels::narrow_backward(val(*x).shape(), *axis, *start, g))]
            }
            Op::PixelShuffle { x, s } => vec![(*x, kernels::pixel_unshuffle(g, *s)?)],
            Op::PixelUnshuffle { x, s } => vec![(*x, kernels::pixel_shuffle(g, *s)?)],
            Op::Upsample { x, factor } => {
                vec![(*x, kernels::upsample_nearest_backward(val(*x).shape(), *factor, g))]
            }
            Op::AvgPool2 { x } => vec![(*x, kernels::avg_pool2_backward(val(*x).shape(), g))],
        })
    }
}

/// Gradients produced by [`Graph::backward`], keyed by leaf and by
/// parameter name.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
    names: IndexMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>> {
        self.grads.get(&v).ok_or(Error::UnrecordedValue(v.0))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|v| self.grads.get(v))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .filter_map(|(k, v)| self.grads.get(v).map(|g| (k.as_str(), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", &Tensor::from_f64(vec![3], &[1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.param("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_f64(vec![2, 2], &[0.5, -1.5, 2.0, 3.0]).unwrap();
        let p = g.param("p", &t);
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(p).unwrap(), &t);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_have_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(vec![2]));
        let p = g.input(Tensor::ones(vec![2]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(matches!(grads.wrt(c), Err(Error::UnrecordedValue(_))));
        assert!(grads.wrt(m).is_err());
        assert!(grads.wrt(p).is_ok());
    }

    #[test]
    fn nan_is_a_hard_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![1], &[-1.0]).unwrap());
        let err = g.powf(x, 0.5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "powf" }));
    }

    #[test]
    fn repeated_param_name_shares_leaf() {
        let mut g = Graph::<f32>::new();
        let t = Tensor::ones(vec![1]);
        assert_eq!(g.param("w", &t), g.param("w", &t));
    }

    #[test]
    fn flop_scopes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(vec![2, 3]));
        let b = g.constant(Tensor::ones(vec![3, 4]));
        g.scoped("core", |g| g.matmul(a, b)).unwrap();
        g.matmul(a, b).unwrap();
        assert_eq!(g.flops().tagged("core"), 48);
        assert_eq!(g.flops().total(), 96);
    }
}
