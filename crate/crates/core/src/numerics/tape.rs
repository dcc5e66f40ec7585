//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node holding its output value and enough
//! context to run its local gradient rule. Because a node's inputs always
//! exist before the node itself, walking the tape backwards from the loss is
//! a valid reverse topological order and visits each node once.

use std::fmt;

use super::tensor::{check_shape, split_at_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations. Binary ops broadcast the operand whose shape is a
/// trailing suffix of the other's (or a single element).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    Neg,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        )
    }

    fn name(self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Div => "div",
            ElementwiseOp::Relu => "relu",
            ElementwiseOp::Sigmoid => "sigmoid",
            ElementwiseOp::Tanh => "tanh",
            ElementwiseOp::Abs => "abs",
            ElementwiseOp::Square => "square",
            ElementwiseOp::Neg => "neg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Coarse operation categories, used to name ops in reports and to target
/// fault injection in the verification harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Elementwise,
    Scale,
    MatMul,
    Permute,
    Reshape,
    Reduce,
    Softmax,
    Concat,
    Slice,
    Conv2d,
    LayerNorm,
    Prelu,
    Custom,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Elementwise => "elementwise",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Reduce => "reduce",
            OpKind::Softmax => "softmax",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Conv2d => "conv2d",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Prelu => "prelu",
            OpKind::Custom => "custom",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial configuration of a 2-D cross-correlation over `[channels, time, freq]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub dilation: (usize, usize),
    /// (before, after) zero padding along time.
    pub pad_time: (usize, usize),
    /// (before, after) zero padding along frequency.
    pub pad_freq: (usize, usize),
}

impl Conv2dGeometry {
    pub const POINTWISE: Conv2dGeometry = Conv2dGeometry {
        dilation: (1, 1),
        pad_time: (0, 0),
        pad_freq: (0, 0),
    };
}

/// An operation whose forward pass runs outside the tape and only registers
/// its output plus a vector-Jacobian product.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each the length of that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Elementwise {
        op: ElementwiseOp,
        a: Var,
        b: Option<Var>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Reduce {
        op: ReduceOp,
        x: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeometry,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Prelu {
        x: Var,
        alpha: Var,
        axis: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Elementwise { .. } => OpKind::Elementwise,
            Op::Scale { .. } => OpKind::Scale,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Prelu { .. } => OpKind::Prelu,
            Op::Custom { .. } => OpKind::Custom,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build a forward pass with the op methods, then call
/// [`Tape::backward`] on a scalar output.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_fault: Option<(OpKind, f64)>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Leaves that require grad
    /// but were unreachable from the loss get an all-zero gradient.
    pub fn wrt(&self, var: Var) -> Option<Tensor> {
        let i = var.0;
        if !self.requires[i] {
            return None;
        }
        let data = match &self.grads[i] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[i].iter().product()],
        };
        Some(Tensor::new(self.shapes[i].clone(), data).expect("gradient shape"))
    }

    /// Like [`Gradients::wrt`] but returns the raw buffer, or `None` if no
    /// gradient reached `var`.
    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn binary_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    let suffix = |long: &[usize], short: &[usize]| {
        short.len() <= long.len() && long[long.len() - short.len()..] == *short
    };
    if nb == 1 || suffix(a, b) {
        Ok(a.to_vec())
    } else if na == 1 || suffix(b, a) {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(m: usize, n: usize, k: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes every gradient rule of `kind` scale its upstream gradient by
    /// `factor`. Only useful as a negative control for gradient checking.
    pub fn inject_grad_fault(&mut self, kind: OpKind, factor: f64) {
        self.grad_fault = Some((kind, factor));
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => Ok(self.unary(op, a)),
            (true, None) => Err(Error::InvalidArgument(format!(
                "{} needs two operands",
                op.name()
            ))),
            (false, Some(_)) => Err(Error::InvalidArgument(format!(
                "{} takes one operand",
                op.name()
            ))),
        }
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let shape = binary_broadcast(op.name(), av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (na, nb) = (ad.len(), bd.len());
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            ElementwiseOp::Mul => |x, y| x * y,
            ElementwiseOp::Div => |x, y| x / y,
            _ => unreachable!(),
        };
        let data: Vec<f64> = if na == n && nb == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Elementwise { op, a, b: Some(b) }, rg))
    }

    fn unary(&mut self, op: ElementwiseOp, x: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            ElementwiseOp::Relu => |v| v.max(0.0),
            ElementwiseOp::Sigmoid => sigmoid,
            ElementwiseOp::Tanh => f64::tanh,
            ElementwiseOp::Abs => f64::abs,
            ElementwiseOp::Square => |v| v * v,
            ElementwiseOp::Neg => |v| -v,
            _ => unreachable!(),
        };
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(&[x]);
        self.push(value, Op::Elementwise { op, a: x, b: None }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Neg, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Matrix product. `a: [.., m, k]` with `b: [k, n]` applies one matrix to
    /// every leading index of `a`; `a: [.., m, k]` with `b: [.., k, n]` and
    /// identical leading dims is a batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batched = bsh.len() > 2;
        if batched && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(mismatch());
        }
        let lead: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; lead * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if batched {
            for bi in 0..lead {
                gemm_nn(
                    m,
                    k,
                    n,
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        } else {
            gemm_nn(lead * m, k, n, ad, bd, &mut out);
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, batched }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::InvalidArgument("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, xv.numel(), 1, vec![1]),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::AxisOutOfRange {
                        op: "reduce",
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let (o, l, i) = split_at_axis(&shape, ax);
                let mut s: Vec<usize> = shape.clone();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                (o, l, i, s)
            }
        };
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for (acc, &v) in out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(&d[base..base + inner])
                        {
                            *acc += v;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let s = 1.0 / len as f64;
                    out.iter_mut().for_each(|v| *v *= s);
                }
            }
            ReduceOp::Max => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * len * inner + i;
                        for l in 1..len {
                            let idx = (o * len + l) * inner + i;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                        argmax[o * inner + i] = best;
                        out[o * inner + i] = d[best];
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Reduce {
                op,
                x,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(ReduceOp::Sum, x, None).expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(ReduceOp::Mean, x, None).expect("full reduction")
    }

    /// Numerically stable softmax along `axis`. Rejects NaN/inf inputs.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: xv.rank(),
            });
        }
        if !xv.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = split_at_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - mx).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_at_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// Picks index `i` along `axis` and drops that axis.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let s = self.slice(x, axis, i, 1)?;
        let mut shape = self.shape(s).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(s, &shape)
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut shape = self.shape(v).to_vec();
            if axis > shape.len() {
                return Err(Error::AxisOutOfRange {
                    op: "stack",
                    axis,
                    rank: shape.len(),
                });
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(v, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    /// Dilated 2-D cross-correlation. `x: [c_in, T, F]`, `w: [c_out, c_in, kt, kf]`,
    /// `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeometry) -> Result<Var> {
        let (xs, ws, bs) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: ws,
                rhs: bs,
            });
        }
        let dims = conv_dims(&xs, &ws, geom)?;
        let plane = dims.positions();
        let mut out = vec![0.0; ws[0] * plane];
        {
            let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            for (o, &bv) in bd.iter().enumerate() {
                out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = bv);
            }
            if dims.is_identity_layout(geom) {
                gemm_nn(dims.c_out, dims.taps(), plane, wd, xd, &mut out);
            } else {
                let cols = dims.im2col(geom, xd);
                gemm_nn(dims.c_out, dims.taps(), plane, wd, &cols, &mut out);
            }
        }
        let value = Tensor::new(vec![ws[0], dims.t_out, dims.f_out], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Layer normalisation over `axis` with per-position affine `gain`/`bias`
    /// of length `shape[axis]`. Variance is the biased estimate; `eps` sits
    /// inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "layer_norm",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        for p in [gain, bias] {
            if self.shape(p) != [len] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let d = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; outer * inner];
        let mut out = vec![0.0; d.len()];
        let inv = 1.0 / len as f64;
        let mut mean = vec![0.0; inner];
        let mut var = vec![0.0; inner];
        for o in 0..outer {
            mean.iter_mut().for_each(|v| *v = 0.0);
            var.iter_mut().for_each(|v| *v = 0.0);
            let block = &d[o * len * inner..(o + 1) * len * inner];
            for l in 0..len {
                for (m, &v) in mean.iter_mut().zip(&block[l * inner..(l + 1) * inner]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv);
            for l in 0..len {
                for ((s, &v), &m) in var
                    .iter_mut()
                    .zip(&block[l * inner..(l + 1) * inner])
                    .zip(&mean)
                {
                    *s += (v - m) * (v - m);
                }
            }
            let r = &mut rstd[o * inner..(o + 1) * inner];
            for (ri, &s) in r.iter_mut().zip(&var) {
                *ri = 1.0 / (s * inv + eps).sqrt();
            }
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let xh = (block[l * inner + i] - mean[i]) * r[i];
                    xhat[base + i] = xh;
                    out[base + i] = xh * g[l] + bb[l];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Parametric ReLU with one slope per index of `axis`.
    pub fn prelu(&mut self, x: Var, alpha: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "prelu",
                axis,
                rank: shape.len(),
            });
        }
        let (_, len, inner) = split_at_axis(&shape, axis);
        if self.shape(alpha) != [len] {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: shape,
                rhs: self.shape(alpha).to_vec(),
            });
        }
        let a = self.value(alpha).data();
        let d = self.value(x).data();
        let out: Vec<f64> = d
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { a[(i / inner) % len] * v })
            .collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, alpha]);
        Ok(self.push(value, Op::Prelu { x, alpha, axis }, rg))
    }

    /// Registers an externally computed `output` together with its gradient rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Runs the reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some((kind, factor)) = self.grad_fault {
                if kind == node.op.kind() {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let requires = self
            .nodes
            .iter()
            .map(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            requires,
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Elementwise { op, a, b: Some(b) } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (ad.len(), bd.len());
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match op {
                            ElementwiseOp::Add | ElementwiseOp::Sub => 1.0,
                            ElementwiseOp::Mul => bd[i % nb],
                            ElementwiseOp::Div => 1.0 / bd[i % nb],
                            _ => unreachable!(),
                        };
                        ga[i % na] += gi * d;
                    }
                }
                if let Some(gb) = self.grad_buf(*b, grads) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match op {
                            ElementwiseOp::Add => 1.0,
                            ElementwiseOp::Sub => -1.0,
                            ElementwiseOp::Mul => ad[i % na],
                            ElementwiseOp::Div => {
                                let y = bd[i % nb];
                                -ad[i % na] / (y * y)
                            }
                            _ => unreachable!(),
                        };
                        gb[i % nb] += gi * d;
                    }
                }
            }
            Op::Elementwise { op, a, b: None } => {
                let xd = self.value(*a).data();
                let yd = out.data();
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for i in 0..g.len() {
                        let d = match op {
                            ElementwiseOp::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ElementwiseOp::Sigmoid => yd[i] * (1.0 - yd[i]),
                            ElementwiseOp::Tanh => 1.0 - yd[i] * yd[i],
                            ElementwiseOp::Abs => sign0(xd[i]),
                            ElementwiseOp::Square => 2.0 * xd[i],
                            ElementwiseOp::Neg => -1.0,
                            _ => unreachable!(),
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for (gx, &gi) in gx.iter_mut().zip(g) {
                        *gx += gi * factor;
                    }
                }
            }
            Op::MatMul { a, b, batched } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ash = av.shape();
                let bsh = bv.shape();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let lead: usize = ash[..ash.len() - 2].iter().product();
                if let Some(ga) = self.grad_buf(*a, grads) {
                    if *batched {
                        for bi in 0..lead {
                            gemm_nt(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv.data()[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    } else {
                        gemm_nt(lead * m, n, k, g, bv.data(), ga);
                    }
                }
                if let Some(gb) = self.grad_buf(*b, grads) {
                    if *batched {
                        for bi in 0..lead {
                            gemm_tn(
                                m,
                                k,
                                n,
                                &av.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    } else {
                        gemm_tn(lead * m, k, n, av.data(), g, gb);
                    }
                }
            }
            Op::Permute { x, perm } => {
                if self.requires_grad(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let gt = Tensor::new(out.shape().to_vec(), g.to_vec())
                        .and_then(|t| t.permute(&inv))
                        .expect("permute grad");
                    let gx = self.grad_buf(*x, grads).unwrap();
                    for (a, b) in gx.iter_mut().zip(gt.data()) {
                        *a += b;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::Reduce {
                op,
                x,
                axis,
                argmax,
            } => {
                let xs = self.shape(*x).to_vec();
                let (outer, len, inner) = match axis {
                    None => (1, xs.iter().product(), 1),
                    Some(ax) => split_at_axis(&xs, *ax),
                };
                if let Some(gx) = self.grad_buf(*x, grads) {
                    match op {
                        ReduceOp::Sum | ReduceOp::Mean => {
                            let s = if *op == ReduceOp::Mean {
                                1.0 / len as f64
                            } else {
                                1.0
                            };
                            for o in 0..outer {
                                for l in 0..len {
                                    let base = (o * len + l) * inner;
                                    for i in 0..inner {
                                        gx[base + i] += g[o * inner + i] * s;
                                    }
                                }
                            }
                        }
                        ReduceOp::Max => {
                            for (&src, &gi) in argmax.iter().zip(g) {
                                gx[src] += gi;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_at_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if let Some(gx) = self.grad_buf(v, grads) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (a, b) in gx[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *a += b;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_at_axis(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                if let Some(gx) = self.grad_buf(*x, grads) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for (a, b) in gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *a += b;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let dims = conv_dims(xv.shape(), wv.shape(), *geom).expect("conv dims");
                let plane = dims.t_out * dims.f_out;
                if let Some(gb) = self.grad_buf(*b, grads) {
                    for (o, gbv) in gb.iter_mut().enumerate() {
                        *gbv += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                }
                let (need_w, need_x) = (self.requires_grad(*w), self.requires_grad(*x));
                let identity = dims.is_identity_layout(*geom);
                if need_w {
                    let cols;
                    let patches = if identity {
                        xv.data()
                    } else {
                        cols = dims.im2col(*geom, xv.data());
                        &cols
                    };
                    let gw = self.grad_buf(*w, grads).unwrap();
                    gemm_nt(dims.c_out, plane, dims.taps(), g, patches, gw);
                }
                if need_x {
                    let wd = wv.data();
                    let gx = self.grad_buf(*x, grads).unwrap();
                    if identity {
                        gemm_tn(dims.c_out, dims.taps(), plane, wd, g, gx);
                    } else {
                        let mut gcols = vec![0.0; dims.taps() * plane];
                        gemm_tn(dims.c_out, dims.taps(), plane, wd, g, &mut gcols);
                        dims.col2im_add(*geom, &gcols, gx);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, len, inner) = split_at_axis(out.shape(), *axis);
                if let Some(gb) = self.grad_buf(*bias, grads) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[(i / inner) % len] += gi;
                    }
                }
                if let Some(gg) = self.grad_buf(*gain, grads) {
                    for (i, &gi) in g.iter().enumerate() {
                        gg[(i / inner) % len] += gi * xhat[i];
                    }
                }
                if self.requires_grad(*x) {
                    let gain_d = self.value(*gain).data();
                    let gx = self.grad_buf(*x, grads).unwrap();
                    let inv = 1.0 / len as f64;
                    let mut m1 = vec![0.0; inner];
                    let mut m2 = vec![0.0; inner];
                    for o in 0..outer {
                        m1.iter_mut().for_each(|v| *v = 0.0);
                        m2.iter_mut().for_each(|v| *v = 0.0);
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                let dxh = g[base + i] * gain_d[l];
                                m1[i] += dxh;
                                m2[i] += dxh * xhat[base + i];
                            }
                        }
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                let dxh = g[base + i] * gain_d[l];
                                gx[base + i] += rstd[o * inner + i]
                                    * (dxh - m1[i] * inv - xhat[base + i] * m2[i] * inv);
                            }
                        }
                    }
                }
            }
            Op::Prelu { x, alpha, axis } => {
                let (_, len, inner) = split_at_axis(out.shape(), *axis);
                let xd = self.value(*x).data();
                if let Some(ga) = self.grad_buf(*alpha, grads) {
                    for (i, (&gi, &xv)) in g.iter().zip(xd).enumerate() {
                        if xv < 0.0 {
                            ga[(i / inner) % len] += gi * xv;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let a = self.value(*alpha).data();
                    let gx = self.grad_buf(*x, grads).unwrap();
                    for (i, (&gi, &xv)) in g.iter().zip(xd).enumerate() {
                        gx[i] += if xv >= 0.0 { gi } else { gi * a[(i / inner) % len] };
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let local = op.backward(&vals, out, g);
                for (&v, lg) in inputs.iter().zip(local) {
                    if let Some(gv) = self.grad_buf(v, grads) {
                        for (a, b) in gv.iter_mut().zip(&lg) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    c_out: usize,
    c_in: usize,
    kt: usize,
    kf: usize,
    t_in: usize,
    f_in: usize,
    t_out: usize,
    f_out: usize,
}

fn conv_dims(xs: &[usize], ws: &[usize], geom: Conv2dGeometry) -> Result<ConvDims> {
    check_shape(xs)?;
    let (t_in, f_in) = (xs[1], xs[2]);
    let (kt, kf) = (ws[2], ws[3]);
    let span_t = geom.dilation.0 * (kt - 1) + 1;
    let span_f = geom.dilation.1 * (kf - 1) + 1;
    let padded_t = t_in + geom.pad_time.0 + geom.pad_time.1;
    let padded_f = f_in + geom.pad_freq.0 + geom.pad_freq.1;
    if geom.dilation.0 == 0 || geom.dilation.1 == 0 || padded_t < span_t || padded_f < span_f {
        return Err(Error::ShapeMismatch {
            op: "conv2d extent",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    Ok(ConvDims {
        c_out: ws[0],
        c_in: ws[1],
        kt,
        kf,
        t_in,
        f_in,
        t_out: padded_t - span_t + 1,
        f_out: padded_f - span_f + 1,
    })
}

impl ConvDims {
    fn taps(&self) -> usize {
        self.c_in * self.kt * self.kf
    }

    fn positions(&self) -> usize {
        self.t_out * self.f_out
    }

    /// A 1x1 kernel without padding reads the input as-is.
    fn is_identity_layout(&self, geom: Conv2dGeometry) -> bool {
        self.kt == 1
            && self.kf == 1
            && geom.pad_time == (0, 0)
            && geom.pad_freq == (0, 0)
    }

    /// Visits every (input channel, kernel tap, output row) with the run of
    /// frequency positions that stays inside the unpadded input. The closure
    /// receives `(row, t_out, t_in, f_out_start, f_in_start, run_len)` where
    /// `row = (c * kt + i) * kf + j` indexes the unrolled patch matrix.
    fn for_each_run(&self, geom: Conv2dGeometry, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (dt, df) = geom.dilation;
        let (pt, pf) = (geom.pad_time.0 as isize, geom.pad_freq.0 as isize);
        for c in 0..self.c_in {
            for i in 0..self.kt {
                let t_shift = (i * dt) as isize - pt;
                for j in 0..self.kf {
                    let row = (c * self.kt + i) * self.kf + j;
                    let f_shift = (j * df) as isize - pf;
                    let f_lo = (-f_shift).max(0) as usize;
                    let f_hi = ((self.f_in as isize - f_shift).min(self.f_out as isize)).max(0) as usize;
                    if f_lo >= f_hi {
                        continue;
                    }
                    for t_out in 0..self.t_out {
                        let t_in = t_out as isize + t_shift;
                        if t_in < 0 || t_in >= self.t_in as isize {
                            continue;
                        }
                        f(row, t_out, t_in as usize, f_lo, (f_lo as isize + f_shift) as usize, f_hi - f_lo);
                    }
                }
            }
        }
    }

    /// Unrolls `x: [c_in, T, F]` into `[c_in*kt*kf, t_out*f_out]` patches.
    fn im2col(&self, geom: Conv2dGeometry, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.taps() * p];
        self.for_each_run(geom, |row, t_out, t_in, f_out, f_in, len| {
            let src = &x[((row / (self.kt * self.kf)) * self.t_in + t_in) * self.f_in + f_in..][..len];
            cols[row * p + t_out * self.f_out + f_out..][..len].copy_from_slice(src);
        });
        cols
    }

    /// Adjoint of [`ConvDims::im2col`], accumulated into `gx`.
    fn col2im_add(&self, geom: Conv2dGeometry, cols: &[f64], gx: &mut [f64]) {
        let p = self.positions();
        self.for_each_run(geom, |row, t_out, t_in, f_out, f_in, len| {
            let dst = &mut gx[((row / (self.kt * self.kf)) * self.t_in + t_in) * self.f_in + f_in..][..len];
            for (d, &v) in dst.iter_mut().zip(&cols[row * p + t_out * self.f_out + f_out..][..len]) {
                *d += v;
            }
        });
    }
}
