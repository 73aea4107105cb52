//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output replays the record in reverse and
//! accumulates adjoints; fan-out is handled by summing contributions.
//!
//! Elementwise binary primitives broadcast only over leading extents of 1:
//! the smaller operand, left-padded with 1s, must equal the larger operand
//! on a trailing suffix of axes and be 1 everywhere before it. Its values
//! then repeat with period equal to its element count.
//!
//! Every primitive checks its result for NaN/Inf and reports the offending
//! primitive by name.

use std::cell::{Cell, RefCell};
use std::ptr;
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, a_t: bool, b_t: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Softplus(usize),
    Powf(usize, f64),
    GradScale(usize, f64),
    Sum(usize),
    Mean(usize),
    SumAxis { a: usize, axis: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { a: usize, inv_std: Vec<f64> },
    ConcatLast(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { a: usize, start: usize },
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Single-owner; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Rc::new(value), Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Rc::new(value), Op::Leaf, false)
    }

    /// Records an input with an explicit gradient flag.
    pub fn input(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_raw(Rc::new(value), Op::Leaf, requires_grad)
    }

    fn push_raw(&self, value: Rc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_raw(Rc::new(value), op, needs_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Replays the tape in reverse from a single-element output.
    ///
    /// The tape is consumed: a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !ptr::eq(output.tape, self) {
            return Err(Error::NotOnTape);
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if out.needs_grad {
            grads[output.id] = Some(vec![1.0]);
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self as *const Tape,
            grads,
            shapes,
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    tape: *const Tape,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if no path reaches it.
    pub fn wrt(&self, var: Var<'_>) -> Result<Tensor> {
        if !ptr::eq(var.tape, self.tape) || var.id >= self.grads.len() {
            return Err(Error::NotOnTape);
        }
        let shape = self.shapes[var.id].clone();
        Ok(match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        })
    }
}

/// Gradient of a single-element `output` with respect to each of `wrt`.
pub fn grad(output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
    let grads = output.tape.backward(output)?;
    wrt.iter().map(|&v| grads.wrt(v)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Folds a full-size adjoint onto a broadcast operand with `n` elements.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, a_t, b_t } => {
            let (m, n) = (node.value.rows(), node.value.cols());
            let (ta, tb) = (val(a), val(b));
            let k = if a_t { ta.rows() } else { ta.cols() };
            if nodes[a].needs_grad {
                let mut da = vec![0.0; m * k];
                if a_t {
                    gemm(tb.data(), b_t, g, true, k, n, m, &mut da, false);
                } else {
                    gemm(g, false, tb.data(), !b_t, m, n, k, &mut da, false);
                }
                accumulate(grads, nodes, a, da);
            }
            if nodes[b].needs_grad {
                let mut db = vec![0.0; k * n];
                if b_t {
                    gemm(g, true, ta.data(), a_t, n, m, k, &mut db, false);
                } else {
                    gemm(ta.data(), !a_t, g, false, k, m, n, &mut db, false);
                }
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (node.value.rows(), node.value.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = g[i * c + j];
                }
            }
            accumulate(grads, nodes, a, out);
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, reduce_to(g, val(a).numel()));
            accumulate(grads, nodes, b, reduce_to(g, val(b).numel()));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, reduce_to(g, val(a).numel()));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, nodes, b, reduce_to(&neg, val(b).numel()));
        }
        &Op::Mul(a, b) => {
            let (ta, tb) = (val(a).data(), val(b).data());
            if nodes[a].needs_grad {
                let full: Vec<f64> = (0..g.len()).map(|i| g[i] * tb[i % tb.len()]).collect();
                accumulate(grads, nodes, a, reduce_to(&full, ta.len()));
            }
            if nodes[b].needs_grad {
                let full: Vec<f64> = (0..g.len()).map(|i| g[i] * ta[i % ta.len()]).collect();
                accumulate(grads, nodes, b, reduce_to(&full, tb.len()));
            }
        }
        &Op::Div(a, b) => {
            let (ta, tb) = (val(a).data(), val(b).data());
            if nodes[a].needs_grad {
                let full: Vec<f64> = (0..g.len()).map(|i| g[i] / tb[i % tb.len()]).collect();
                accumulate(grads, nodes, a, reduce_to(&full, ta.len()));
            }
            if nodes[b].needs_grad {
                let full: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let d = tb[i % tb.len()];
                        -g[i] * ta[i % ta.len()] / (d * d)
                    })
                    .collect();
                accumulate(grads, nodes, b, reduce_to(&full, tb.len()));
            }
        }
        &Op::Neg(a) => accumulate(grads, nodes, a, g.iter().map(|v| -v).collect()),
        &Op::Scale(a, c) => accumulate(grads, nodes, a, g.iter().map(|v| v * c).collect()),
        &Op::GradScale(a, c) => accumulate(grads, nodes, a, g.iter().map(|v| v * c).collect()),
        &Op::AddScalar(a) | &Op::Reshape(a) => accumulate(grads, nodes, a, g.to_vec()),
        &Op::Exp(a) => accumulate(grads, nodes, a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
        &Op::Log(a) => {
            let x = val(a).data();
            accumulate(grads, nodes, a, g.iter().zip(x).map(|(g, x)| g / x).collect())
        }
        &Op::Sigmoid(a) => accumulate(
            grads,
            nodes,
            a,
            g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
        ),
        &Op::LogSigmoid(a) => {
            let x = val(a).data();
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(x).map(|(g, &x)| g * sigmoid(-x)).collect(),
            )
        }
        &Op::Softplus(a) => {
            let x = val(a).data();
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect(),
            )
        }
        &Op::Powf(a, p) => {
            let x = val(a).data();
            let d = g
                .iter()
                .zip(x)
                .map(|(g, &x)| if p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) })
                .collect();
            accumulate(grads, nodes, a, d)
        }
        &Op::Sum(a) => accumulate(grads, nodes, a, vec![g[0]; val(a).numel()]),
        &Op::Mean(a) => {
            let n = val(a).numel();
            accumulate(grads, nodes, a, vec![g[0] / n as f64; n])
        }
        &Op::SumAxis { a, axis } => {
            let (outer, len, inner) = axis_layout(val(a).shape(), axis);
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        d[(o * len + l) * inner + i] = g[o * inner + i];
                    }
                }
            }
            accumulate(grads, nodes, a, d)
        }
        &Op::Softmax { a, axis } => {
            let (outer, len, inner) = axis_layout(node.value.shape(), axis);
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        d[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            accumulate(grads, nodes, a, d)
        }
        Op::LayerNorm { a, inv_std } => {
            let width = node.value.cols();
            let mut d = vec![0.0; y.len()];
            for (r, &s) in inv_std.iter().enumerate() {
                let gs = &g[r * width..(r + 1) * width];
                let ys = &y[r * width..(r + 1) * width];
                let mg = gs.iter().sum::<f64>() / width as f64;
                let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                for c in 0..width {
                    d[r * width + c] = s * (gs[c] - mg - ys[c] * mgy);
                }
            }
            accumulate(grads, nodes, *a, d)
        }
        Op::ConcatLast(parts) => {
            let total = node.value.cols();
            let outer = y.len() / total;
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if nodes[p].needs_grad {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                    }
                    accumulate(grads, nodes, p, d);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                accumulate(grads, nodes, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        &Op::SliceRows { a, start } => {
            let src = val(a);
            let width = src.numel() / src.rows();
            let mut d = vec![0.0; src.numel()];
            d[start * width..start * width + g.len()].copy_from_slice(g);
            accumulate(grads, nodes, a, d)
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Output shape and broadcast validity for an elementwise binary primitive.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (big, small) = if (na, a.len()) >= (nb, b.len()) { (a, b) } else { (b, a) };
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if small.len() > big.len() {
        return Err(mismatch());
    }
    let mut padded = vec![1; big.len() - small.len()];
    padded.extend_from_slice(small);
    // Leading run of 1s, then an exact suffix match.
    let ok = (0..=big.len()).any(|k| {
        padded[..k].iter().all(|&e| e == 1) && padded[k..] == big[k..]
    });
    if ok {
        Ok(big.to_vec())
    } else {
        Err(mismatch())
    }
}

fn binary_values(a: &Tensor, b: &Tensor, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (da, db) = (a.data(), b.data());
    (0..n).map(|i| f(da[i % da.len()], db[i % db.len()])).collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }

    fn unary(
        self,
        name: &'static str,
        op: Op,
        f: impl Fn(&Tensor) -> Tensor,
    ) -> Result<Var<'t>> {
        let out = f(&self.value());
        self.tape.push(name, out, op, self.requires_grad())
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast(name, a.shape(), b.shape())?;
        let n = shape.iter().product();
        let out = Tensor::from_parts(shape, binary_values(&a, &b, n, f));
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(name, out, op, needs)
    }

    fn matmul_impl(self, other: Var<'t>, a_t: bool, b_t: bool) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (ar, ac) = a.dims2().map_err(|_| mismatch())?;
        let (br, bc) = b.dims2().map_err(|_| mismatch())?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(a.data(), a_t, b.data(), b_t, m, k, n, &mut out, false);
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                a_t,
                b_t,
            },
            needs,
        )
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, true)
    }

    pub fn t(self) -> Result<Var<'t>> {
        let v = self.value();
        let out = v.transpose()?;
        self.tape
            .push("transpose", out, Op::Transpose(self.id), self.requires_grad())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", Op::Neg(self.id), |t| t.map(|x| -x))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |t| t.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |t| t.map(|x| x + c))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), |t| t.map(f64::ln))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    /// `ln σ(x)`, evaluated without forming σ(x).
    pub fn log_sigmoid(self) -> Result<Var<'t>> {
        self.unary("log_sigmoid", Op::LogSigmoid(self.id), |t| {
            t.map(|x| -softplus(-x))
        })
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", Op::Softplus(self.id), |t| t.map(softplus))
    }

    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        self.unary("powf", Op::Powf(self.id, p), |t| t.map(|x| x.powf(p)))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Identity in the forward pass; multiplies the adjoint by `c`.
    pub fn grad_scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("grad_scale", Op::GradScale(self.id, c), |t| t.clone())
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(self) -> Result<Var<'t>> {
        self.unary("sum", Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(self) -> Result<Var<'t>> {
        self.unary("mean", Op::Mean(self.id), |t| {
            Tensor::scalar(t.sum() / t.numel() as f64)
        })
    }

    fn check_axis(&self, name: &str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "{name}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("sum_axis", axis)?;
        self.unary("sum_axis", Op::SumAxis { a: self.id, axis }, |t| {
            let (outer, len, inner) = axis_layout(&shape, axis);
            let d = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * len + l) * inner + i];
                    }
                }
            }
            let mut s = shape.clone();
            s[axis] = 1;
            Tensor::from_parts(s, out)
        })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("softmax", axis)?;
        self.unary("softmax", Op::Softmax { a: self.id, axis }, |t| {
            Tensor::from_parts(shape.clone(), softmax_values(t.data(), &shape, axis))
        })
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let width = v.cols();
        let rows = v.numel() / width;
        let mut out = vec![0.0; v.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xs = &v.data()[r * width..(r + 1) * width];
            let mean = xs.iter().sum::<f64>() / width as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            for c in 0..width {
                out[r * width + c] = (xs[c] - mean) * s;
            }
            inv_std.push(s);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.tape.push(
            "layer_norm",
            out,
            Op::LayerNorm { a: self.id, inv_std },
            self.requires_grad(),
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape
            .push("reshape", out, Op::Reshape(self.id), self.requires_grad())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let rows = v.rows();
        if start >= end || end > rows {
            return Err(Error::invalid(format!(
                "slice_rows: {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let width = v.numel() / rows;
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::from_parts(shape, v.data()[start * width..end * width].to_vec());
        self.tape.push(
            "slice_rows",
            out,
            Op::SliceRows { a: self.id, start },
            self.requires_grad(),
        )
    }
}

fn softmax_values(d: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = (d[idx(l)] - max).exp();
                out[idx(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[idx(l)] /= z;
            }
        }
    }
    out
}

/// Softmax of a plain tensor along `axis`, matching [`Var::softmax`].
pub fn softmax_tensor(t: &Tensor, axis: usize) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), softmax_values(t.data(), t.shape(), axis))
}

/// Concatenates along the last axis; all leading extents must agree.
pub fn concat_last<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_last of nothing"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let lead = &values[0].shape()[..values[0].rank() - 1];
    let mut width = 0;
    for (p, v) in parts.iter().zip(&values) {
        first.same_tape(p)?;
        if &v.shape()[..v.rank() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: values[0].shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        width += v.cols();
    }
    let outer: usize = lead.iter().product();
    let mut data = Vec::with_capacity(outer * width);
    for o in 0..outer {
        for v in &values {
            let w = v.cols();
            data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(width);
    let needs = parts.iter().any(|p| p.requires_grad());
    tape.push(
        "concat_last",
        Tensor::from_parts(shape, data),
        Op::ConcatLast(parts.iter().map(|p| p.id).collect()),
        needs,
    )
}

/// Concatenates along the leading axis; trailing extents must agree.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let tail = values[0].shape()[1..].to_vec();
    let mut rows = 0;
    let mut data = Vec::new();
    for (p, v) in parts.iter().zip(&values) {
        first.same_tape(p)?;
        if v.shape()[1..] != tail[..] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: values[0].shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        rows += v.rows();
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![rows];
    shape.extend(tail);
    let needs = parts.iter().any(|p| p.requires_grad());
    tape.push(
        "concat_rows",
        Tensor::from_parts(shape, data),
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        needs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = z.softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_last_joins_vectors() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let c = concat_last(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(c.shape(), vec![3]);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let f = x.mul(y).unwrap();
        let g = grad(f, &[x, y]).unwrap();
        assert_eq!(g[0].item(), 3.0);
        assert_eq!(g[1].item(), 2.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let tape = Tape::new();
        let z = tape.leaf(t(&[4], &[0.3, -1.2, 2.0, 0.1]));
        let f = z.softmax(0).unwrap().sum().unwrap();
        let g = grad(f, &[z]).unwrap();
        assert!(g[0].data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros([3]));
        let f = z.sigmoid().unwrap().sum().unwrap();
        let g = grad(f, &[z]).unwrap();
        assert_eq!(g[0].data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn fan_out_accumulates() {
        let base = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
        let tape = Tape::new();
        let x = tape.leaf(base.clone());
        let f = x.sum().unwrap().add(x.sum().unwrap()).unwrap();
        let twice = grad(f, &[x]).unwrap().remove(0);
        let tape = Tape::new();
        let x = tape.leaf(base);
        let once = grad(x.sum().unwrap(), &[x]).unwrap().remove(0);
        assert_eq!(twice, once.map(|v| 2.0 * v));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast("t", &[3, 4], &[1, 4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast("t", &[3, 4], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast("t", &[1], &[3, 4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast("t", &[2, 3, 4], &[1, 1, 4]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast("t", &[3, 4], &[3, 1]).is_err());
        assert!(broadcast("t", &[3, 4], &[4, 3]).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn non_finite_names_primitive() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1], &[-1.0]));
        match a.log() {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::NotOnTape)));

        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let s = x.sum().unwrap();
        let g = tape.backward(s).unwrap();
        assert!(matches!(g.wrt(y), Err(Error::NotOnTape)));
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 0.0, 10.0]));
        let y = x.layer_norm(0.0).unwrap().value();
        for r in 0..2 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
