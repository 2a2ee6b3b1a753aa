//! Append-only computation graph with reverse-mode differentiation.
//!
//! Backward passes are themselves recorded on the tape (when `create_graph`
//! is set), so gradients can be differentiated again. Every vector-Jacobian
//! product below is written in terms of tape operations for that reason.
//!
//! Nodes are appended in evaluation order, which is also a topological order;
//! the backward sweep simply walks ids downwards.

use std::cell::{Cell, Ref, RefCell};
use std::ops;

use crate::tensor::{self, Tensor};
use crate::AutodiffError;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    MatMulTN(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `scale * x + shift`
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    /// `1/x`, with `0` mapped to `0`.
    Recip(usize),
    Clamp(usize, f64, f64),
    LogSoftmax(usize),
    BroadcastRows(usize),
    SumRows(usize),
    BroadcastCols(usize),
    SumCols(usize),
    SumAll(usize),
    Expand(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    PadCols(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::MatMulTN(..) => "matmul_tn",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Clamp(..) => "clamp",
            Op::LogSoftmax(..) => "log_softmax",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumCols(..) => "sum_cols",
            Op::SumAll(..) => "sum_all",
            Op::Expand(..) => "expand",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
        }
    }

    fn for_each_parent(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::MatMulTN(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Affine(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Clamp(a, ..)
            | Op::LogSoftmax(a)
            | Op::BroadcastRows(a)
            | Op::SumRows(a)
            | Op::BroadcastCols(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Expand(a)
            | Op::SliceCols(a, ..)
            | Op::PadCols(a, ..) => f(*a),
            Op::ConcatCols(parts) => parts.iter().for_each(|&p| f(p)),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    name: &'static str,
    requires_grad: bool,
}

/// A single-threaded computation graph. Distinct tapes share nothing.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
    poison: Cell<Option<(usize, &'static str)>>,
}

/// Handle to a node on a [`Tape`].
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

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
            no_grad: Cell::new(false),
            poison: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// First non-finite node recorded so far, as an error.
    pub fn check(&self) -> Result<(), AutodiffError> {
        match self.poison.get() {
            Some((node, op)) => Err(AutodiffError::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    /// Runs `f` with graph recording disabled: every node created inside is a
    /// constant leaf.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.no_grad.replace(true);
        let out = f();
        self.no_grad.set(prev);
        out
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let requires_grad = requires_grad && !self.no_grad.get();
        self.push_node(Node {
            value,
            op: Op::Leaf,
            name: "leaf",
            requires_grad,
        })
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let name = op.name();
        let requires_grad = !self.no_grad.get() && {
            let nodes = self.nodes.borrow();
            let mut any = false;
            op.for_each_parent(|p| any |= nodes[p].requires_grad);
            any
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(Node {
            value,
            op,
            name,
            requires_grad,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let finite = node.value.is_finite();
        let name = node.name;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        if !finite && self.poison.get().is_none() {
            self.poison.set(Some((id, name)));
        }
        Var { tape: self, id }
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        self.push(op, value)
    }

    fn binary(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        self.push(op, value)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves differentiable
    /// functions of every leaf that influenced them; otherwise they are
    /// constants.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>, AutodiffError> {
        self.check()?;
        let out_shape = output.shape();
        if out_shape != [1, 1] {
            return Err(AutodiffError::NotScalar(out_shape));
        }
        let n = output.id + 1;

        // Only nodes that lie on a path from some `wrt` leaf matter.
        let mut reaches = vec![false; n];
        for w in wrt {
            if w.id < n {
                reaches[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if reaches[id] || !nodes[id].requires_grad {
                    continue;
                }
                let mut any = false;
                nodes[id].op.for_each_parent(|p| any |= reaches[p]);
                reaches[id] = any;
            }
        }

        let prev = self.no_grad.replace(!create_graph);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if reaches[output.id] {
            grads[output.id] = Some(self.scalar(1.0));
        }
        for id in (0..n).rev() {
            if !reaches[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let y = self.var(id);
            let mut acc = |p: usize, contrib: Var<'t>| {
                if reaches[p] {
                    grads[p] = Some(match grads[p] {
                        Some(e) => e + contrib,
                        None => contrib,
                    });
                }
            };
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(a, g.matmul_nt(self.var(b)));
                    acc(b, self.var(a).matmul_tn(g));
                }
                Op::MatMulNT(a, b) => {
                    acc(a, g.matmul(self.var(b)));
                    acc(b, g.matmul_tn(self.var(a)));
                }
                Op::MatMulTN(a, b) => {
                    acc(a, self.var(b).matmul_nt(g));
                    acc(b, self.var(a).matmul(g));
                }
                Op::Add(a, b) => {
                    acc(a, g);
                    acc(b, g);
                }
                Op::Sub(a, b) => {
                    acc(a, g);
                    acc(b, -g);
                }
                Op::Mul(a, b) => {
                    acc(a, g * self.var(b));
                    acc(b, g * self.var(a));
                }
                Op::Affine(a, s) => acc(a, g.scale(s)),
                Op::Tanh(a) => acc(a, g * (y * y).affine(-1.0, 1.0)),
                Op::Sigmoid(a) => acc(a, g * y * y.affine(-1.0, 1.0)),
                Op::Exp(a) => acc(a, g * y),
                Op::Log(a) => acc(a, g * self.var(a).recip()),
                Op::Sqrt(a) => acc(a, g * y.recip().scale(0.5)),
                Op::Recip(a) => acc(a, -(g * y * y)),
                Op::Clamp(a, lo, hi) => {
                    let mask = self.nodes.borrow()[a]
                        .value
                        .map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                    acc(a, g * self.constant(mask));
                }
                Op::LogSoftmax(a) => {
                    let cols = y.shape()[1];
                    acc(a, g - y.exp() * g.sum_cols().broadcast_cols(cols));
                }
                Op::BroadcastRows(a) => acc(a, g.sum_rows()),
                Op::SumRows(a) => {
                    let rows = self.var(a).shape()[0];
                    acc(a, g.broadcast_rows(rows));
                }
                Op::BroadcastCols(a) => acc(a, g.sum_cols()),
                Op::SumCols(a) => {
                    let cols = self.var(a).shape()[1];
                    acc(a, g.broadcast_cols(cols));
                }
                Op::SumAll(a) => {
                    let s = self.var(a).shape();
                    acc(a, g.expand(s[0], s[1]));
                }
                Op::Expand(a) => acc(a, g.sum_all()),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.var(p).shape()[1];
                        acc(p, g.slice_cols(start, w));
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let total = self.var(a).shape()[1];
                    acc(a, g.pad_cols(start, total));
                }
                Op::PadCols(a, start) => {
                    let w = self.var(a).shape()[1];
                    acc(a, g.slice_cols(start, w));
                }
            }
        }

        let result = wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(&w.shape())))
            })
            .collect();
        self.no_grad.set(prev);
        self.check()?;
        Ok(result)
    }
}

fn assert_same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| {
                assert_eq!(a.cols(), b.rows(), "matmul: inner dimensions differ");
                tensor::matmul(a, b)
            },
            Op::MatMul(self.id, other.id),
        )
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| {
                assert_eq!(a.cols(), b.cols(), "matmul_nt: inner dimensions differ");
                tensor::matmul_nt(a, b)
            },
            Op::MatMulNT(self.id, other.id),
        )
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(self, other: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| {
                assert_eq!(a.rows(), b.rows(), "matmul_tn: inner dimensions differ");
                tensor::matmul_tn(a, b)
            },
            Op::MatMulTN(self.id, other.id),
        )
    }

    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.map(|x| scale * x + shift), Op::Affine(self.id, scale))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::ln), Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::sqrt), Op::Sqrt(self.id))
    }

    /// Elementwise reciprocal; zero maps to zero.
    pub fn recip(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.map(|x| if x == 0.0 { 0.0 } else { 1.0 / x }),
            Op::Recip(self.id),
        )
    }

    /// Elementwise clamp. The derivative is 1 inside `[lo, hi]` and 0 outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.map(|x| x.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// Row-wise log-softmax of an `[m, n]` matrix.
    pub fn log_softmax(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let (m, n) = (a.rows(), a.cols());
                let mut out = Vec::with_capacity(m * n);
                for r in 0..m {
                    let row = a.row_slice(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                    out.extend(row.iter().map(|x| x - lse));
                }
                Tensor::new(vec![m, n], out).expect("log_softmax shape")
            },
            Op::LogSoftmax(self.id),
        )
    }

    /// `[1, n] -> [rows, n]`
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                assert_eq!(a.rows(), 1, "broadcast_rows: expects a single row");
                let mut data = Vec::with_capacity(rows * a.cols());
                for _ in 0..rows {
                    data.extend_from_slice(a.data());
                }
                Tensor::new(vec![rows, a.cols()], data).expect("broadcast_rows shape")
            },
            Op::BroadcastRows(self.id),
        )
    }

    /// `[m, n] -> [1, n]`
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let mut out = vec![0.0; a.cols()];
                for r in 0..a.rows() {
                    for (o, x) in out.iter_mut().zip(a.row_slice(r)) {
                        *o += x;
                    }
                }
                Tensor::row(out)
            },
            Op::SumRows(self.id),
        )
    }

    /// `[m, 1] -> [m, cols]`
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                assert_eq!(a.cols(), 1, "broadcast_cols: expects a single column");
                let data = a.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
                Tensor::new(vec![a.rows(), cols], data).expect("broadcast_cols shape")
            },
            Op::BroadcastCols(self.id),
        )
    }

    /// `[m, n] -> [m, 1]`
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let data = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
                Tensor::new(vec![a.rows(), 1], data).expect("sum_cols shape")
            },
            Op::SumCols(self.id),
        )
    }

    /// `[m, n] -> [1, 1]`
    pub fn sum_all(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| Tensor::scalar(a.sum()), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// `[1, 1] -> [rows, cols]`
    pub fn expand(self, rows: usize, cols: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                assert_eq!(a.len(), 1, "expand: expects a scalar");
                Tensor::full(&[rows, cols], a.item())
            },
            Op::Expand(self.id),
        )
    }

    /// Adds a `[1, n]` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let rows = self.shape()[0];
        self + row.broadcast_rows(rows)
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                assert!(start + width <= a.cols(), "slice_cols: out of range");
                let mut data = Vec::with_capacity(a.rows() * width);
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.row_slice(r)[start..start + width]);
                }
                Tensor::new(vec![a.rows(), width], data).expect("slice_cols shape")
            },
            Op::SliceCols(self.id, start),
        )
    }

    /// Embeds `self` at column `start` of a zero matrix `total` columns wide.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                assert!(start + a.cols() <= total, "pad_cols: out of range");
                let mut data = vec![0.0; a.rows() * total];
                for r in 0..a.rows() {
                    data[r * total + start..r * total + start + a.cols()].copy_from_slice(a.row_slice(r));
                }
                Tensor::new(vec![a.rows(), total], data).expect("pad_cols shape")
            },
            Op::PadCols(self.id, start),
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let tape = parts[0].tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.id].value;
                    assert_eq!(v.rows(), rows, "concat_cols: row counts differ");
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::new(vec![rows, total], data).expect("concat_cols shape")
        };
        tape.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), value)
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

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            rhs.id,
            |a, b| {
                assert_same_shape("add", a, b);
                a.zip_map(b, |x, y| x + y)
            },
            Op::Add(self.id, rhs.id),
        )
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            rhs.id,
            |a, b| {
                assert_same_shape("sub", a, b);
                a.zip_map(b, |x, y| x - y)
            },
            Op::Sub(self.id, rhs.id),
        )
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            rhs.id,
            |a, b| {
                assert_same_shape("mul", a, b);
                a.zip_map(b, |x, y| x * y)
            },
            Op::Mul(self.id, rhs.id),
        )
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let tape = Tape::new();
        let p = tape.param(Tensor::row(vec![1.0, 2.0]));
        let loss = p.square().sum_all().scale(0.5);
        let g = tape.grad(loss, &[p], false).unwrap();
        assert_eq!(g[0].value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let p = tape.param(Tensor::row(vec![1.0, 2.0]));
        let loss = tape.scalar(3.0);
        let g = tape.grad(loss, &[p], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let p = tape.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.grad(p, &[p], false), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn first_non_finite_node_is_reported() {
        let tape = Tape::new();
        let p = tape.param(Tensor::row(vec![-1.0, 2.0]));
        let bad = p.ln(); // node 1
        let _worse = bad.exp(); // NaN propagates, but node 1 is first
        let loss = bad.sum_all();
        match tape.grad(loss, &[p], false) {
            Err(AutodiffError::NonFinite { node, op }) => {
                assert_eq!(node, bad.id());
                assert_eq!(op, "log");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn second_derivative_of_cubic() {
        // d/dx (x^3) = 3x^2, d2/dx2 = 6x
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = x * x * x;
        let g = tape.grad(y, &[x], true).unwrap()[0];
        assert!((g.item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let h = tape.grad(g, &[x], false).unwrap()[0];
        assert!((h.item() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn second_derivative_through_tanh_and_log_softmax() {
        let tape = Tape::new();
        let x = tape.param(m(1, 3, &[0.3, -0.2, 0.9]));
        let y = x.tanh().log_softmax().slice_cols(1, 1).sum_all();
        let g = tape.grad(y, &[x], true).unwrap()[0];
        let gg = tape.grad(g.square().sum_all(), &[x], false).unwrap()[0];
        assert!(gg.value().is_finite());

        // finite differences of |grad|^2
        let f = |v: &[f64]| {
            let t = Tape::new();
            let x = t.param(m(1, 3, v));
            let y = x.tanh().log_softmax().slice_cols(1, 1).sum_all();
            let g = t.grad(y, &[x], false).unwrap()[0];
            let sq: f64 = g.value().data().iter().map(|a| a * a).sum();
            sq
        };
        let base = [0.3, -0.2, 0.9];
        for i in 0..3 {
            let (mut hi, mut lo) = (base, base);
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let fd = (f(&hi) - f(&lo)) / 2e-5;
            assert!((fd - gg.value().data()[i]).abs() < 1e-7, "coord {i}");
        }
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let tape = Tape::new();
        let x = tape.param(Tensor::row(vec![-3.0, 0.5, 3.0]));
        let y = x.clamp(-1.0, 1.0).sum_all();
        let g = tape.grad(y, &[x], false).unwrap()[0];
        assert_eq!(g.value().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sqrt_at_zero_has_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.sqrt();
        let g = tape.grad(y, &[x], false).unwrap()[0];
        assert_eq!(g.item(), 0.0);
    }

    #[test]
    fn no_grad_nodes_are_constants() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.no_grad(|| x * x);
        assert!(!y.requires_grad());
        let g = tape.grad((y * x).sum_all(), &[x], false).unwrap()[0];
        assert_eq!(g.item(), 4.0);
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let tape = Tape::new();
        let a = tape.param(m(2, 1, &[1.0, 2.0]));
        let b = tape.param(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = Var::concat_cols(&[a, b]);
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = (c * w).sum_all();
        let g = tape.grad(loss, &[a, b], false).unwrap();
        assert_eq!(g[0].value().data(), &[1.0, 4.0]);
        assert_eq!(g[1].value().data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
