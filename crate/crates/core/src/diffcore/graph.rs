//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order and never mutated afterwards, so
//! parents always precede children and a reverse sweep over the node list
//! is a valid topological order. All reductions accumulate in `f64`.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::DiffError;
use crate::tensor::{Real, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator together with its non-tensor arguments.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Parameter,
    MatMul,
    /// Elementwise; the second operand may broadcast over the leading axis.
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Scale(f64),
    AddScalar(f64),
    Sum,
    Mean,
    /// Reductions over the leading axis.
    SumRows,
    MeanRows,
    /// `(a - b)^2`, broadcasting like `Add`.
    SqDiff,
    /// Euclidean norm along the last axis.
    NormLast,
    Sqrt,
    Abs,
    Concat {
        axis: usize,
    },
    GatherRows(Vec<usize>),
    /// Mean softmax cross-entropy of `[B, C]` logits against integer labels.
    SoftmaxCrossEntropy(Vec<usize>),
    /// `x[B, Cin, L] * w[Cout, Cin, K] (+ b[Cout])`, stride 1, no padding.
    Conv1d,
    /// Non-overlapping max pooling along the last axis of `[B, C, L]`.
    MaxPool {
        window: usize,
    },
    Reshape(Vec<usize>),
}

/// Payload-free operator identifier, parseable from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Parameter,
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Scale,
    AddScalar,
    Sum,
    Mean,
    SumRows,
    MeanRows,
    SqDiff,
    NormLast,
    Sqrt,
    Abs,
    Concat,
    GatherRows,
    SoftmaxCrossEntropy,
    Conv1d,
    MaxPool,
    Reshape,
}

const OP_NAMES: &[(OpKind, &str)] = &[
    (OpKind::Input, "input"),
    (OpKind::Parameter, "parameter"),
    (OpKind::MatMul, "matmul"),
    (OpKind::Add, "add"),
    (OpKind::Sub, "sub"),
    (OpKind::Mul, "mul"),
    (OpKind::Relu, "relu"),
    (OpKind::Tanh, "tanh"),
    (OpKind::Scale, "scale"),
    (OpKind::AddScalar, "add_scalar"),
    (OpKind::Sum, "sum"),
    (OpKind::Mean, "mean"),
    (OpKind::SumRows, "sum_rows"),
    (OpKind::MeanRows, "mean_rows"),
    (OpKind::SqDiff, "sq_diff"),
    (OpKind::NormLast, "norm_last"),
    (OpKind::Sqrt, "sqrt"),
    (OpKind::Abs, "abs"),
    (OpKind::Concat, "concat"),
    (OpKind::GatherRows, "gather_rows"),
    (OpKind::SoftmaxCrossEntropy, "softmax_cross_entropy"),
    (OpKind::Conv1d, "conv1d"),
    (OpKind::MaxPool, "max_pool"),
    (OpKind::Reshape, "reshape"),
];

impl OpKind {
    pub fn name(self) -> &'static str {
        OP_NAMES.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap_or("?")
    }
}

impl FromStr for OpKind {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OP_NAMES.iter().find(|(_, n)| *n == s).map(|(k, _)| *k).ok_or_else(|| DiffError::UnknownOp(s.to_string()))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Parameter => OpKind::Parameter,
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Relu => OpKind::Relu,
            Op::Tanh => OpKind::Tanh,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::SumRows => OpKind::SumRows,
            Op::MeanRows => OpKind::MeanRows,
            Op::SqDiff => OpKind::SqDiff,
            Op::NormLast => OpKind::NormLast,
            Op::Sqrt => OpKind::Sqrt,
            Op::Abs => OpKind::Abs,
            Op::Concat { .. } => OpKind::Concat,
            Op::GatherRows(_) => OpKind::GatherRows,
            Op::SoftmaxCrossEntropy(_) => OpKind::SoftmaxCrossEntropy,
            Op::Conv1d => OpKind::Conv1d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    parents: Vec<Var>,
    /// Forward-pass residue needed by backward (softmax probabilities).
    saved: Vec<T>,
    /// Argmax positions for max pooling.
    saved_idx: Vec<usize>,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

#[derive(Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: OpKind, shapes: &[&[usize]]) -> DiffError {
    DiffError::ShapeMismatch { op: op.name(), shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

fn invalid(op: OpKind, detail: &str) -> DiffError {
    DiffError::InvalidArgument { op: op.name(), detail: detail.to_string() }
}

/// `Some(false)` for equal shapes, `Some(true)` when `b` broadcasts over the
/// leading axis of `a`.
fn broadcast_rule(a: &[usize], b: &[usize]) -> Option<bool> {
    if a == b {
        return Some(false);
    }
    if a.len() >= 2 {
        let rest = &a[1..];
        if b == rest || (b.len() == a.len() && b[0] == 1 && &b[1..] == rest) {
            return Some(true);
        }
    }
    None
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: Vec<Var>) -> Var {
        self.push_saved(value, op, parents, Vec::new(), Vec::new())
    }

    fn push_saved(&mut self, value: Tensor<T>, op: Op, parents: Vec<Var>, saved: Vec<T>, saved_idx: Vec<usize>) -> Var {
        self.nodes.push(Node { value, op, parents, saved, saved_idx });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, Vec::new())
    }

    /// Trainable leaf; its gradient is what [`Graph::backward`] is usually asked for.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Parameter, Vec::new())
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    /// Evaluates `op` on `operands` and records the result.
    pub fn apply(&mut self, op: Op, operands: &[Var]) -> Result<Var, DiffError> {
        let kind = op.kind();
        let arity = match kind {
            OpKind::Input | OpKind::Parameter => return Err(invalid(kind, "leaves are created with input()/param()")),
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::SqDiff => Some(2),
            OpKind::Concat => None,
            OpKind::Conv1d => {
                if operands.len() != 2 && operands.len() != 3 {
                    return Err(invalid(kind, "expects (input, weight[, bias])"));
                }
                None
            }
            _ => Some(1),
        };
        if let Some(n) = arity {
            if operands.len() != n {
                return Err(invalid(kind, "wrong operand count"));
            }
        }
        if operands.iter().any(|v| v.0 >= self.nodes.len()) {
            return Err(invalid(kind, "operand from another graph"));
        }
        match op {
            Op::MatMul => self.fwd_matmul(operands[0], operands[1]),
            Op::Add | Op::Sub | Op::Mul | Op::SqDiff => self.fwd_binary(op, operands[0], operands[1]),
            Op::Relu | Op::Tanh | Op::Scale(_) | Op::AddScalar(_) | Op::Sqrt | Op::Abs => {
                Ok(self.fwd_unary(op, operands[0]))
            }
            Op::Sum | Op::Mean => {
                let a = self.value(operands[0]);
                let s: f64 = a.data().iter().map(|v| v.f64()).sum();
                let s = if matches!(op, Op::Mean) { s / a.numel() as f64 } else { s };
                Ok(self.push(Tensor::scalar(T::of(s)), op, operands.to_vec()))
            }
            Op::SumRows | Op::MeanRows => {
                let a = self.value(operands[0]);
                let (n, k) = (a.rows(), a.row_len());
                let mut acc = vec![0f64; k];
                for i in 0..n {
                    for (s, v) in acc.iter_mut().zip(a.row(i)) {
                        *s += v.f64();
                    }
                }
                if matches!(op, Op::MeanRows) {
                    acc.iter_mut().for_each(|s| *s /= n as f64);
                }
                let shape = if a.shape().len() == 1 { vec![1] } else { a.shape()[1..].to_vec() };
                let out = Tensor::new(shape, acc.into_iter().map(T::of).collect())?;
                Ok(self.push(out, op, operands.to_vec()))
            }
            Op::NormLast => {
                let a = self.value(operands[0]);
                let n = *a.shape().last().unwrap();
                let out: Vec<T> = a
                    .data()
                    .chunks(n)
                    .map(|c| T::of(libm::sqrt(c.iter().map(|v| v.f64() * v.f64()).sum::<f64>())))
                    .collect();
                let out = Tensor::new(reduced_shape(a.shape()), out)?;
                Ok(self.push(out, op, operands.to_vec()))
            }
            Op::Concat { axis } => self.fwd_concat(axis, operands),
            Op::GatherRows(idx) => {
                let a = self.value(operands[0]);
                if idx.is_empty() {
                    return Err(invalid(kind, "empty index list"));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows()) {
                    let _ = bad;
                    return Err(mismatch(kind, &[a.shape(), &[idx.len()]]));
                }
                let out = a.gather_rows(&idx);
                Ok(self.push(out, Op::GatherRows(idx), operands.to_vec()))
            }
            Op::SoftmaxCrossEntropy(labels) => self.fwd_softmax_ce(labels, operands[0]),
            Op::Conv1d => self.fwd_conv1d(operands),
            Op::MaxPool { window } => self.fwd_max_pool(window, operands[0]),
            Op::Reshape(shape) => {
                let a = self.value(operands[0]);
                if shape.iter().product::<usize>() != a.numel() || shape.contains(&0) {
                    return Err(mismatch(kind, &[a.shape(), &shape]));
                }
                let out = a.clone().reshape(&shape)?;
                Ok(self.push(out, Op::Reshape(shape), operands.to_vec()))
            }
            Op::Input | Op::Parameter => unreachable!(),
        }
    }

    fn fwd_matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch(OpKind::MatMul, &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|s| *s = 0.0);
            for p in 0..k {
                let x = ad[i * k + p].f64();
                if x == 0.0 {
                    continue;
                }
                for (s, w) in acc.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *s += x * w.f64();
                }
            }
            out.extend(acc.iter().map(|&s| T::of(s)));
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul, vec![a, b]))
    }

    fn fwd_binary(&mut self, op: Op, a: Var, b: Var) -> Result<Var, DiffError> {
        let kind = op.kind();
        let (av, bv) = (self.value(a), self.value(b));
        let rule = broadcast_rule(av.shape(), bv.shape());
        let ok = match kind {
            OpKind::Mul => rule == Some(false),
            _ => rule.is_some(),
        };
        if !ok {
            return Err(mismatch(kind, &[av.shape(), bv.shape()]));
        }
        let bl = bv.numel();
        let bd = bv.data();
        let out: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % bl];
                match kind {
                    OpKind::Add => x + y,
                    OpKind::Sub => x - y,
                    OpKind::Mul => x * y,
                    _ => (x - y) * (x - y),
                }
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(out, op, vec![a, b]))
    }

    fn fwd_unary(&mut self, op: Op, a: Var) -> Var {
        let av = self.value(a);
        let f: &dyn Fn(T) -> T = match &op {
            Op::Relu => &|x: T| if x > T::zero() { x } else { T::zero() },
            Op::Tanh => &|x: T| x.tanh(),
            Op::Scale(c) => {
                let c = T::of(*c);
                &move |x: T| x * c
            }
            Op::AddScalar(c) => {
                let c = T::of(*c);
                &move |x: T| x + c
            }
            Op::Sqrt => &|x: T| x.sqrt(),
            Op::Abs => &|x: T| x.abs(),
            _ => unreachable!(),
        };
        let out: Vec<T> = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), out).expect("unary shape");
        self.push(out, op, vec![a])
    }

    fn fwd_concat(&mut self, axis: usize, operands: &[Var]) -> Result<Var, DiffError> {
        if operands.is_empty() {
            return Err(invalid(OpKind::Concat, "no operands"));
        }
        let first = self.value(operands[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(invalid(OpKind::Concat, "axis out of range"));
        }
        let mut total = 0;
        for &v in operands {
            let s = self.value(v).shape();
            let same_rank = s.len() == first.len();
            if !same_rank || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y) {
                return Err(mismatch(OpKind::Concat, &[&first, s]));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in operands {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat { axis }, operands.to_vec()))
    }

    fn fwd_softmax_ce(&mut self, labels: Vec<usize>, logits: Var) -> Result<Var, DiffError> {
        let kind = OpKind::SoftmaxCrossEntropy;
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch(kind, &[s, &[labels.len()]]));
        }
        let c = s[1];
        if labels.iter().any(|&l| l >= c) {
            return Err(invalid(kind, "label out of range"));
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut total = 0f64;
        for (b, &label) in labels.iter().enumerate() {
            let row = lv.row(b);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let z: f64 = row.iter().map(|v| libm::exp(v.f64() - max)).sum();
            let lse = max + libm::log(z);
            total += lse - row[label].f64();
            probs.extend(row.iter().map(|v| T::of(libm::exp(v.f64() - lse))));
        }
        let loss = Tensor::scalar(T::of(total / labels.len() as f64));
        Ok(self.push_saved(loss, Op::SoftmaxCrossEntropy(labels), vec![logits], probs, Vec::new()))
    }

    fn fwd_conv1d(&mut self, operands: &[Var]) -> Result<Var, DiffError> {
        let kind = OpKind::Conv1d;
        let (xv, wv) = (self.value(operands[0]), self.value(operands[1]));
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sw[2] > sx[2] {
            return Err(mismatch(kind, &[sx, sw]));
        }
        let bias = match operands.get(2) {
            Some(&b) => {
                let bv = self.value(b);
                if bv.shape() != [sw[0]] {
                    return Err(mismatch(kind, &[sx, sw, bv.shape()]));
                }
                Some(bv.data())
            }
            None => None,
        };
        let (nb, ci, l) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        let lo = l - k + 1;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = Vec::with_capacity(nb * co * lo);
        for b in 0..nb {
            for o in 0..co {
                let b0 = bias.map_or(0.0, |bd| bd[o].f64());
                for t in 0..lo {
                    let mut s = b0;
                    for c in 0..ci {
                        let xr = &xd[(b * ci + c) * l + t..(b * ci + c) * l + t + k];
                        let wr = &wd[(o * ci + c) * k..(o * ci + c + 1) * k];
                        for (x, w) in xr.iter().zip(wr) {
                            s += x.f64() * w.f64();
                        }
                    }
                    out.push(T::of(s));
                }
            }
        }
        let out = Tensor::new(vec![nb, co, lo], out)?;
        Ok(self.push(out, Op::Conv1d, operands.to_vec()))
    }

    fn fwd_max_pool(&mut self, window: usize, a: Var) -> Result<Var, DiffError> {
        let kind = OpKind::MaxPool;
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || window == 0 || window > s[2] {
            return Err(mismatch(kind, &[s, &[window]]));
        }
        let (rows, l) = (s[0] * s[1], s[2]);
        let lo = l / window;
        let d = av.data();
        let mut out = Vec::with_capacity(rows * lo);
        let mut arg = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            for t in 0..lo {
                let start = r * l + t * window;
                let mut best = start;
                for i in start + 1..start + window {
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
        let out = Tensor::new(vec![s[0], s[1], lo], out)?;
        Ok(self.push_saved(out, Op::MaxPool { window }, vec![a], Vec::new(), arg))
    }

    // Convenience wrappers; each one is `apply` with a fixed operator.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.fwd_unary(Op::Relu, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.fwd_unary(Op::Tanh, a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.fwd_unary(Op::Scale(c), a)
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.fwd_unary(Op::AddScalar(c), a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.fwd_unary(Op::Sqrt, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.fwd_unary(Op::Abs, a)
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.apply(Op::Sum, &[a]).expect("sum is total")
    }
    pub fn mean(&mut self, a: Var) -> Var {
        self.apply(Op::Mean, &[a]).expect("mean is total")
    }
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.apply(Op::SumRows, &[a]).expect("sum_rows is total")
    }
    pub fn mean_rows(&mut self, a: Var) -> Var {
        self.apply(Op::MeanRows, &[a]).expect("mean_rows is total")
    }
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Op::SqDiff, &[a, b])
    }
    pub fn norm_last(&mut self, a: Var) -> Var {
        self.apply(Op::NormLast, &[a]).expect("norm is total")
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        self.apply(Op::GatherRows(idx.to_vec()), &[a])
    }
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, DiffError> {
        self.apply(Op::SoftmaxCrossEntropy(labels.to_vec()), &[logits])
    }
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        match b {
            Some(b) => self.apply(Op::Conv1d, &[x, w, b]),
            None => self.apply(Op::Conv1d, &[x, w]),
        }
    }
    pub fn max_pool(&mut self, a: Var, window: usize) -> Result<Var, DiffError> {
        self.apply(Op::MaxPool { window }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(DiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (parent, contrib) in self.vjp(i, &g) {
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a = *a + *c),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products of node `i` for each of its parents.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let p = &node.parents;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Parameter => Vec::new(),
            Op::MatMul => {
                let (a, b) = (val(p[0]), val(p[1]));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let (ad, bd) = (a.data(), b.data());
                let mut ga = Vec::with_capacity(m * k);
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    for q in 0..k {
                        let br = &bd[q * n..(q + 1) * n];
                        let s: f64 = gr.iter().zip(br).map(|(x, y)| x.f64() * y.f64()).sum();
                        ga.push(T::of(s));
                    }
                }
                let mut gb = vec![0f64; k * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    for q in 0..k {
                        let x = ad[r * k + q].f64();
                        if x == 0.0 {
                            continue;
                        }
                        for (s, y) in gb[q * n..(q + 1) * n].iter_mut().zip(gr) {
                            *s += x * y.f64();
                        }
                    }
                }
                vec![(p[0], ga), (p[1], gb.into_iter().map(T::of).collect())]
            }
            Op::Add | Op::Sub | Op::Mul | Op::SqDiff => {
                let (a, b) = (val(p[0]), val(p[1]));
                let bl = b.numel();
                let (ad, bd) = (a.data(), b.data());
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = vec![0f64; bl];
                for (idx, &gi) in g.iter().enumerate() {
                    let (x, y) = (ad[idx], bd[idx % bl]);
                    let (da, db) = match node.op {
                        Op::Add => (gi, gi),
                        Op::Sub => (gi, -gi),
                        Op::Mul => (gi * y, gi * x),
                        _ => {
                            let d = T::of(2.0) * (x - y) * gi;
                            (d, -d)
                        }
                    };
                    ga.push(da);
                    gb[idx % bl] += db.f64();
                }
                vec![(p[0], ga), (p[1], gb.into_iter().map(T::of).collect())]
            }
            Op::Relu => {
                let a = val(p[0]).data();
                let ga = g.iter().zip(a).map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() });
                vec![(p[0], ga.collect())]
            }
            Op::Tanh => {
                let y = out.data();
                let ga = g.iter().zip(y).map(|(&gi, &t)| gi * (T::one() - t * t));
                vec![(p[0], ga.collect())]
            }
            Op::Scale(c) => {
                let c = T::of(*c);
                vec![(p[0], g.iter().map(|&gi| gi * c).collect())]
            }
            Op::AddScalar(_) | Op::Reshape(_) => vec![(p[0], g.to_vec())],
            Op::Sqrt => {
                // d sqrt(x) at x = 0 is taken as 0.
                let y = out.data();
                let ga = g.iter().zip(y).map(|(&gi, &s)| if s > T::zero() { gi / (T::of(2.0) * s) } else { T::zero() });
                vec![(p[0], ga.collect())]
            }
            Op::Abs => {
                // Subgradient 0 at the kink.
                let a = val(p[0]).data();
                let ga = g.iter().zip(a).map(|(&gi, &x)| {
                    if x > T::zero() {
                        gi
                    } else if x < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                vec![(p[0], ga.collect())]
            }
            Op::Sum => vec![(p[0], vec![g[0]; val(p[0]).numel()])],
            Op::Mean => {
                let n = val(p[0]).numel();
                vec![(p[0], vec![T::of(g[0].f64() / n as f64); n])]
            }
            Op::SumRows | Op::MeanRows => {
                let a = val(p[0]);
                let (n, k) = (a.rows(), a.row_len());
                let scale = if matches!(node.op, Op::MeanRows) { 1.0 / n as f64 } else { 1.0 };
                let row: Vec<T> = g.iter().map(|gi| T::of(gi.f64() * scale)).collect();
                let mut ga = Vec::with_capacity(n * k);
                for _ in 0..n {
                    ga.extend_from_slice(&row);
                }
                vec![(p[0], ga)]
            }
            Op::NormLast => {
                let a = val(p[0]);
                let n = *a.shape().last().unwrap();
                let norms = out.data();
                let mut ga = Vec::with_capacity(a.numel());
                for (r, chunk) in a.data().chunks(n).enumerate() {
                    let nr = norms[r];
                    for &x in chunk {
                        ga.push(if nr > T::zero() { g[r] * x / nr } else { T::zero() });
                    }
                }
                vec![(p[0], ga)]
            }
            Op::Concat { axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                let mut res = Vec::with_capacity(p.len());
                for &v in p {
                    let chunk = val(v).shape()[*axis] * inner;
                    let mut gv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    offset += chunk;
                    res.push((v, gv));
                }
                res
            }
            Op::GatherRows(idx) => {
                let a = val(p[0]);
                let k = a.row_len();
                let mut ga = vec![0f64; a.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (s, gi) in ga[src * k..(src + 1) * k].iter_mut().zip(&g[r * k..(r + 1) * k]) {
                        *s += gi.f64();
                    }
                }
                vec![(p[0], ga.into_iter().map(T::of).collect())]
            }
            Op::SoftmaxCrossEntropy(labels) => {
                let c = val(p[0]).shape()[1];
                let scale = g[0].f64() / labels.len() as f64;
                let mut ga: Vec<T> = node.saved.iter().map(|&pr| T::of(pr.f64() * scale)).collect();
                for (b, &l) in labels.iter().enumerate() {
                    ga[b * c + l] = T::of(ga[b * c + l].f64() - scale);
                }
                vec![(p[0], ga)]
            }
            Op::Conv1d => {
                let (x, w) = (val(p[0]), val(p[1]));
                let (nb, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (co, k) = (w.shape()[0], w.shape()[2]);
                let lo = l - k + 1;
                let (xd, wd) = (x.data(), w.data());
                let mut gx = vec![0f64; x.numel()];
                let mut gw = vec![0f64; w.numel()];
                let mut gbias = vec![0f64; co];
                for b in 0..nb {
                    for o in 0..co {
                        for t in 0..lo {
                            let gi = g[(b * co + o) * lo + t].f64();
                            if gi == 0.0 {
                                continue;
                            }
                            gbias[o] += gi;
                            for c in 0..ci {
                                let xo = (b * ci + c) * l + t;
                                let wo = (o * ci + c) * k;
                                for q in 0..k {
                                    gx[xo + q] += gi * wd[wo + q].f64();
                                    gw[wo + q] += gi * xd[xo + q].f64();
                                }
                            }
                        }
                    }
                }
                let mut res =
                    vec![(p[0], gx.into_iter().map(T::of).collect()), (p[1], gw.into_iter().map(T::of).collect())];
                if let Some(&b) = p.get(2) {
                    res.push((b, gbias.into_iter().map(T::of).collect()));
                }
                res
            }
            Op::MaxPool { .. } => {
                let mut ga = vec![0f64; val(p[0]).numel()];
                for (&src, gi) in node.saved_idx.iter().zip(g) {
                    ga[src] += gi.f64();
                }
                vec![(p[0], ga.into_iter().map(T::of).collect())]
            }
        }
    }
}
