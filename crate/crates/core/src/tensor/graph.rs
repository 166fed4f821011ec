use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{ParameterStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    StopGradient,
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Conv1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    AvgPool { x: Var, stride: usize },
    Repeat { x: Var, factor: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::StopGradient => "stop_gradient",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::LogSumExp { .. } => "logsumexp",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::AvgPool { .. } => "avg_pool",
            Op::Repeat { .. } => "repeat",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Clamp { x, .. }
            | Op::SumAxis { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Pad { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Repeat { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv1d { x, w, b, .. } | Op::ConvTranspose1d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

/// Records a differentiable computation.
///
/// Nodes are appended in evaluation order, which is a topological order, and
/// [`Graph::backward`] walks them in exact reverse.
pub struct Graph<'p, S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    params: Option<&'p ParameterStore<S>>,
    param_vars: BTreeMap<String, Var>,
    macs: u64,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn softplus<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// A graph without trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: BTreeMap::new(),
            macs: 0,
        }
    }

    pub fn with_params(params: &'p ParameterStore<S>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by convolution nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input leaf; its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for the named parameter. Repeated calls return the same node so
    /// that every use accumulates into one gradient.
    /// Makes `param(name)` resolve to an existing node instead of the store.
    pub fn bind_param(&mut self, name: impl Into<String>, var: Var) {
        self.param_vars.insert(name.into(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let value = store.get(name)?.clone();
        let v = self.leaf(value);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, op: Op, value: Tensor<S>) -> Result<Var> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op, value)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(S) -> S) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Neg(x), x, |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cs = S::of(c);
        self.unary(Op::Scale(x, c), x, |v| v * cs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let cs = S::of(c);
        self.unary(Op::AddScalar(x), x, |v| v + cs)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh(x), x, |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Softplus(x), x, softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp(x), x, |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log(x), x, |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Square(x), x, |v| v * v)
    }

    /// Clamps into `[lo, hi]`. The gradient passes where `lo <= x <= hi`
    /// and is zero strictly outside. Infinite bounds are allowed.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        let (l, h) = (S::of(lo), S::of(hi));
        self.unary(Op::Clamp { x, lo, hi }, x, |v| v.max(l).min(h))
    }

    /// Identity in the forward pass; blocks all gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::StopGradient, value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s: S = v.data().iter().copied().sum();
        let n = S::of(v.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(s / n))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &v.data()[(o * n + k) * inner..][..inner];
                for (y, &s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *y += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(Op::SumAxis { x, axis }, value)
    }

    fn lse_rows(v: &Tensor<S>, axis: usize) -> Vec<S> {
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = S::neg_infinity();
                for k in 0..n {
                    m = m.max(d[(o * n + k) * inner + i]);
                }
                let s: S = (0..n).map(|k| (d[(o * n + k) * inner + i] - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        out
    }

    /// Max-shifted log-sum-exp over `axis`, removing it.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", x, axis)?;
        let v = self.value(x);
        let out = Self::lse_rows(v, axis);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(Op::LogSumExp { x, axis }, value)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let v = self.value(x);
        let lse = Self::lse_rows(v, axis);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[(o * n + k) * inner + i] -= lse[o * inner + i];
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::LogSoftmax { x, axis }, value)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::new(shape, v.data().to_vec())?;
        self.push(Op::Reshape(x), value)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        for &x in &xs[1..] {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = xs.iter().map(|&x| self.shape(x)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..][..n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            value,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        if start > end || end > n {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} outside extent {n} of axis {axis}"),
            ));
        }
        let m = end - start;
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * n + start) * inner..][..m * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = m;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Slice { x, axis, start }, value)
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        self.check_axis("pad", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let m = n + before + after;
        let mut out = vec![S::zero(); outer * m * inner];
        for o in 0..outer {
            out[(o * m + before) * inner..][..n * inner]
                .copy_from_slice(&v.data()[o * n * inner..][..n * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = m;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Pad { x, axis, before }, value)
    }

    /// Causal 1-D convolution of `x: [batch, cin, time]` with
    /// `w: [cout, cin, k]` and `b: [cout]`. The input is left-padded by
    /// `(k-1)·dilation` zeros; with `stride > 1` output `t` is anchored at
    /// input `t·stride + stride - 1`. The time extent must be divisible by
    /// the stride.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize, stride: usize) -> Result<Var> {
        let (batch, cin, t_in) = self.value(x).dims3("conv1d")?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, kernel] = ws[..] else {
            return Err(Error::invalid("conv1d", format!("weight must be [cout, cin, k], got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        if self.shape(b) != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: vec![cout],
                rhs: self.shape(b).to_vec(),
            });
        }
        if dilation == 0 || stride == 0 || kernel == 0 {
            return Err(Error::invalid("conv1d", "kernel, dilation and stride must be positive"));
        }
        if t_in % stride != 0 {
            return Err(Error::invalid(
                "conv1d",
                format!("time extent {t_in} not divisible by stride {stride}; pad the sequence first"),
            ));
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            kernel,
            dilation,
            stride,
            t_in,
            t_out: t_in / stride,
        };
        let data = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        self.macs += geom.macs();
        let value = Tensor::new([batch, cout, geom.t_out], data)?;
        self.push(Op::Conv1d { x, w, b, geom }, value)
    }

    /// Transposed convolution with kernel width equal to `stride`:
    /// `x: [batch, cin, time]`, `w: [cin, cout, stride]`, `b: [cout]`, output
    /// `[batch, cout, time·stride]`. Output `t·stride + j` depends on input `t`
    /// only.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (batch, cin, t_in) = self.value(x).dims3("conv_transpose1d")?;
        let ws = self.shape(w).to_vec();
        let [wcin, cout, kernel] = ws[..] else {
            return Err(Error::invalid(
                "conv_transpose1d",
                format!("weight must be [cin, cout, stride], got {ws:?}"),
            ));
        };
        if wcin != cin || kernel != stride || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        if self.shape(b) != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: vec![cout],
                rhs: self.shape(b).to_vec(),
            });
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            kernel,
            dilation: 1,
            stride,
            t_in,
            t_out: t_in * stride,
        };
        let data = kernels::conv_transpose1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        self.macs += (batch * cin * cout * stride * t_in) as u64;
        let value = Tensor::new([batch, cout, geom.t_out], data)?;
        self.push(Op::ConvTranspose1d { x, w, b, geom }, value)
    }

    /// Mean over non-overlapping time windows of width `stride`.
    pub fn avg_pool(&mut self, x: Var, stride: usize) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3("avg_pool")?;
        if stride == 0 || t % stride != 0 {
            return Err(Error::invalid(
                "avg_pool",
                format!("time extent {t} not divisible by stride {stride}"),
            ));
        }
        let inv = S::of(1.0 / stride as f64);
        let out = self
            .value(x)
            .data()
            .chunks(stride)
            .map(|w| w.iter().copied().sum::<S>() * inv)
            .collect();
        let value = Tensor::new([b, c, t / stride], out)?;
        self.push(Op::AvgPool { x, stride }, value)
    }

    /// Nearest-neighbour upsampling: every time step repeated `factor` times.
    pub fn repeat(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3("repeat")?;
        if factor == 0 {
            return Err(Error::invalid("repeat", "factor must be positive"));
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, factor))
            .collect();
        let value = Tensor::new([b, c, t * factor], out)?;
        self.push(Op::Repeat { x, factor }, value)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients are accumulated (summed) into every differentiable leaf,
    /// including parameters. A non-finite gradient aborts the sweep and names
    /// the first node at which it appears.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if gout.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    op: node.op.name(),
                    node: idx,
                });
            }
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), gout)?);
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
        }
        Ok(Gradients {
            grads: leaf_grads,
            params: self.param_vars.clone(),
        })
    }

    /// Accumulates into the gradient buffer of `v` when it is differentiable.
    fn acc(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); n.value.len()]);
        f(buf);
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let zip_add = |buf: &mut [S], f: &dyn Fn(usize) -> S| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        };

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| zip_add(buf, &|i| g[i]));
                self.acc(grads, *b, |buf| zip_add(buf, &|i| g[i]));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| zip_add(buf, &|i| g[i]));
                self.acc(grads, *b, |buf| zip_add(buf, &|i| -g[i]));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |buf| zip_add(buf, &|i| g[i] * vb[i]));
                self.acc(grads, *b, |buf| zip_add(buf, &|i| g[i] * va[i]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |buf| zip_add(buf, &|i| g[i] / vb[i]));
                self.acc(grads, *b, |buf| zip_add(buf, &|i| -g[i] * va[i] / (vb[i] * vb[i])));
            }
            Op::Neg(x) => self.acc(grads, *x, |buf| zip_add(buf, &|i| -g[i])),
            Op::Scale(x, c) => {
                let c = S::of(*c);
                self.acc(grads, *x, |buf| zip_add(buf, &|i| g[i] * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |buf| zip_add(buf, &|i| g[i])),
            Op::Tanh(x) => self.acc(grads, *x, |buf| zip_add(buf, &|i| g[i] * (S::one() - y[i] * y[i]))),
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |buf| zip_add(buf, &|i| g[i] * y[i] * (S::one() - y[i])))
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                self.acc(grads, *x, |buf| zip_add(buf, &|i| g[i] * sigmoid(vx[i])));
            }
            Op::Exp(x) => self.acc(grads, *x, |buf| zip_add(buf, &|i| g[i] * y[i])),
            Op::Log(x) => {
                let vx = val(*x);
                self.acc(grads, *x, |buf| zip_add(buf, &|i| g[i] / vx[i]));
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two = S::of(2.0);
                self.acc(grads, *x, |buf| zip_add(buf, &|i| two * vx[i] * g[i]));
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                let (l, h) = (S::of(*lo), S::of(*hi));
                self.acc(grads, *x, |buf| {
                    zip_add(buf, &|i| {
                        if vx[i] >= l && vx[i] <= h {
                            g[i]
                        } else {
                            S::zero()
                        }
                    })
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |buf| zip_add(buf, &|_| g[0])),
            Op::Mean(x) => {
                let n = S::of(val(*x).len() as f64);
                self.acc(grads, *x, |buf| zip_add(buf, &|_| g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                buf[(o * n + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let vx = val(*x);
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                let j = (o * n + k) * inner + i;
                                buf[j] += g[o * inner + i] * (vx[j] - y[o * inner + i]).exp();
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let total: S = (0..n).map(|k| g[(o * n + k) * inner + i]).sum();
                            for k in 0..n {
                                let j = (o * n + k) * inner + i;
                                buf[j] += g[j] - y[j].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    self.acc(grads, x, |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..n * inner];
                            for (b, &s) in buf[o * n * inner..][..n * inner].iter_mut().zip(src) {
                                *b += s;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let m = node.value.shape()[*axis];
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        let src = &g[o * m * inner..][..m * inner];
                        for (b, &s) in buf[(o * n + start) * inner..][..m * inner].iter_mut().zip(src) {
                            *b += s;
                        }
                    }
                });
            }
            Op::Pad { x, axis, before } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let m = node.value.shape()[*axis];
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        let src = &g[(o * m + before) * inner..][..n * inner];
                        for (b, &s) in buf[o * n * inner..][..n * inner].iter_mut().zip(src) {
                            *b += s;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                self.conv_grads(*x, *w, *b, g, grads, |xd, wd, dy, dx, dw, db| {
                    kernels::conv1d_backward(xd, wd, dy, geom, dx, dw, db)
                });
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                self.conv_grads(*x, *w, *b, g, grads, |xd, wd, dy, dx, dw, db| {
                    kernels::conv_transpose1d_backward(xd, wd, dy, geom, dx, dw, db)
                });
            }
            Op::AvgPool { x, stride } => {
                let inv = S::of(1.0 / *stride as f64);
                self.acc(grads, *x, |buf| zip_add(buf, &|i| g[i / stride] * inv));
            }
            Op::Repeat { x, factor } => {
                self.acc(grads, *x, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i * factor..][..*factor].iter().copied().sum::<S>();
                    }
                });
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn conv_grads(
        &self,
        x: Var,
        w: Var,
        b: Var,
        dy: &[S],
        grads: &mut [Option<Vec<S>>],
        kernel: impl FnOnce(&[S], &[S], &[S], Option<&mut [S]>, Option<&mut [S]>, Option<&mut [S]>),
    ) {
        let mut take = |v: Var| {
            let n = &self.nodes[v.0];
            n.requires_grad
                .then(|| grads[v.0].take().unwrap_or_else(|| vec![S::zero(); n.value.len()]))
        };
        let (mut dx, mut dw, mut db) = (take(x), take(w), take(b));
        kernel(
            self.value(x).data(),
            self.value(w).data(),
            dy,
            dx.as_deref_mut(),
            dw.as_deref_mut(),
            db.as_deref_mut(),
        );
        for (v, buf) in [(x, dx), (w, dw), (b, db)] {
            if let Some(buf) = buf {
                grads[v.0] = Some(buf);
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients of every differentiable leaf.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf, or `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// `(name, gradient)` for every parameter the loss depends on.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params
            .iter()
            .filter_map(|(k, &v)| self.wrt(v).map(|g| (k.as_str(), g)))
    }
}
