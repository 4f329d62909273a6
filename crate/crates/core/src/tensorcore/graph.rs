//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] owns the tape; [`Var`] is a cheap copyable handle to one node.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the backward pass. Graphs are single-threaded;
//! independent graphs may live on different threads.

use std::cell::RefCell;
use std::rc::Rc;

use super::contract::{contract, ContractSpec};
use super::tensor::{axis_split, broadcast_shape, expand, reduce_to, Tensor};
use crate::error::{dim_err, Error, Result};

enum Op {
    Leaf,
    Contract { spec: Rc<ContractSpec>, a: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    ReduceSum { x: usize, axis: usize },
    SumAll(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Affine { x: usize, w: usize, b: usize },
    L2Normalize { x: usize, axis: usize, norms: Vec<f64> },
    StraightThrough { x: usize },
    BceWithLogits { logits: usize, targets: Rc<Tensor> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = self.requires(inputs);
        self.push(value, op, rg)
    }

    /// Runs the backward pass from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0; nodes[root.id].value.len()]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                if !n.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; n.value.len()]);
                Some(Tensor::from_parts(n.value.shape().to_vec(), data))
            })
            .collect();
        Gradients { grads }
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` does not require gradients. Nodes the
    /// root does not depend on get an all-zero gradient.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Contract { spec, a, b } => {
            let gt = Tensor::from_parts(y.shape().to_vec(), g.to_vec());
            if wants(*a) {
                let ga = contract(&spec.grad_a(), &gt, val(*b)).expect("contract grad");
                accumulate(grads, *a, ga.into_data());
            }
            if wants(*b) {
                let gb = contract(&spec.grad_b(), val(*a), &gt).expect("contract grad");
                accumulate(grads, *b, gb.into_data());
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(*a) {
                accumulate(grads, *a, reduce_to(g, y.shape(), val(*a).shape()));
            }
            if wants(*b) {
                let mut gb = reduce_to(g, y.shape(), val(*b).shape());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            for (this, other) in [(*a, *b), (*b, *a)] {
                if wants(this) {
                    let o = expand(val(other).data(), val(other).shape(), y.shape());
                    let prod: Vec<f64> = g.iter().zip(&o).map(|(g, o)| g * o).collect();
                    accumulate(grads, this, reduce_to(&prod, y.shape(), val(this).shape()));
                }
                if a == b {
                    break;
                }
            }
            if a == b && wants(*a) {
                // x*x: both factors contribute
                let x = val(*a).data();
                accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
        }
        Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
        Op::Exp(x) => accumulate(grads, *x, zip_map(g, y.data(), |g, y| g * y)),
        Op::Tanh(x) => accumulate(grads, *x, zip_map(g, y.data(), |g, y| g * (1.0 - y * y))),
        Op::Sigmoid(x) => accumulate(grads, *x, zip_map(g, y.data(), |g, y| g * y * (1.0 - y))),
        Op::Relu(x) => {
            let xv = val(*x).data();
            accumulate(grads, *x, zip_map(g, xv, |g, x| if x > 0.0 { g } else { 0.0 }))
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(y.shape(), *axis);
            let yd = y.data();
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * yd[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::ReduceSum { x, axis } => {
            let (outer, len, inner) = axis_split(val(*x).shape(), *axis);
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::SumAll(x) => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(y.shape(), *axis);
            let total = y.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if wants(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, total, inner) = axis_split(xs, *axis);
            let len = y.shape()[*axis];
            let mut gx = vec![0.0; val(*x).len()];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *x, gx);
        }
        Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
        Op::Affine { x, w, b } => {
            let wt = val(*w);
            let (n_in, n_out) = (wt.shape()[0], wt.shape()[1]);
            let xd = val(*x).data();
            let rows = xd.len() / n_in;
            if wants(*x) {
                let wd = wt.data();
                let mut gx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let grow = &g[r * n_out..(r + 1) * n_out];
                    for i in 0..n_in {
                        let wrow = &wd[i * n_out..(i + 1) * n_out];
                        gx[r * n_in + i] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                    }
                }
                accumulate(grads, *x, gx);
            }
            if wants(*w) {
                let mut gw = vec![0.0; n_in * n_out];
                for r in 0..rows {
                    let grow = &g[r * n_out..(r + 1) * n_out];
                    for i in 0..n_in {
                        let xi = xd[r * n_in + i];
                        let dst = &mut gw[i * n_out..(i + 1) * n_out];
                        for (d, gv) in dst.iter_mut().zip(grow) {
                            *d += xi * gv;
                        }
                    }
                }
                accumulate(grads, *w, gw);
            }
            if wants(*b) {
                let mut gb = vec![0.0; n_out];
                for r in 0..rows {
                    for (d, gv) in gb.iter_mut().zip(&g[r * n_out..(r + 1) * n_out]) {
                        *d += gv;
                    }
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::L2Normalize { x, axis, norms } => {
            let (outer, len, inner) = axis_split(y.shape(), *axis);
            let yd = y.data();
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let n = norms[o * inner + i];
                    let dot: f64 = (0..len).map(|j| g[at(j)] * yd[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = (g[at(j)] - yd[at(j)] * dot) / n;
                    }
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::StraightThrough { x } => accumulate(grads, *x, g.to_vec()),
        Op::BceWithLogits { logits, targets } => {
            let l = val(*logits).data();
            let n = l.len() as f64;
            let gx = l
                .iter()
                .zip(targets.data())
                .map(|(&l, &t)| g[0] * (sigmoid(l) - t) / n)
                .collect();
            accumulate(grads, *logits, gx);
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable per-element binary cross-entropy on a logit.
pub(crate) fn bce_term(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.graph.record(out, op, &[self.id])
    }

    fn binary(&self, other: &Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let Some(shape) = broadcast_shape(a.shape(), b.shape()) else {
            return dim_err(format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
        };
        let data = if a.shape() == b.shape() {
            zip_map(a.data(), b.data(), f)
        } else {
            let ea = expand(a.data(), a.shape(), &shape);
            let eb = expand(b.data(), b.shape(), &shape);
            zip_map(&ea, &eb, f)
        };
        Ok(self.graph.record(Tensor::from_parts(shape, data), op, &[self.id, other.id]))
    }

    /// Labelled contraction, e.g. `x.contract("ai,ikd->akd", &theta)`.
    pub fn contract(&self, spec: &str, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let spec = ContractSpec::parse(spec)?;
        let out = contract(&spec, &self.value(), &other.value())?;
        let op = Op::Contract { spec: Rc::new(spec), a: self.id, b: other.id };
        Ok(self.graph.record(out, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'g> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph.record(out, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn reduce_sum(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, out);
        Ok(self.graph.record(out, Op::ReduceSum { x: self.id, axis }, &[self.id]))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&self) -> Var<'g> {
        let total = self.value().data().iter().sum();
        self.graph.record(Tensor::scalar(total), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let Some(first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let ref_shape = values[0].shape();
        check_axis(ref_shape, axis)?;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == ref_shape.len()
                && s.iter().zip(ref_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return dim_err(format!("concat of {ref_shape:?} with {s:?} along {axis}"));
            }
        }
        for p in parts {
            first.same_graph(p);
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(ref_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = ref_shape.to_vec();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat { parts: ids.clone(), axis };
        Ok(first.graph.record(Tensor::from_parts(shape, data), op, &ids))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, total, inner) = axis_split(x.shape(), axis);
        if len == 0 || start + len > total {
            return dim_err(format!("narrow [{start}, {}) of extent {total}", start + len));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[src..src + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let op = Op::Narrow { x: self.id, axis, start };
        Ok(self.graph.record(Tensor::from_parts(shape, data), op, &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let out = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        Ok(self.graph.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// `x · W + b` over the last axis of `x`; `W: (in, out)`, `b: (out)`.
    pub fn affine(&self, w: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(w);
        self.same_graph(b);
        let (x, wt, bt) = (self.value(), w.value(), b.value());
        if wt.rank() != 2 || bt.shape() != [wt.shape()[1]] || x.rank() == 0 {
            return dim_err(format!(
                "affine with W {:?} and b {:?}",
                wt.shape(),
                bt.shape()
            ));
        }
        let (n_in, n_out) = (wt.shape()[0], wt.shape()[1]);
        if x.shape()[x.rank() - 1] != n_in {
            return dim_err(format!("affine input {:?} against W {:?}", x.shape(), wt.shape()));
        }
        let rows = x.len() / n_in;
        let mut out = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            out.extend_from_slice(bt.data());
        }
        super::contract::gemm_acc(x.data(), wt.data(), &mut out, rows, n_in, n_out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let op = Op::Affine { x: self.id, w: w.id, b: b.id };
        Ok(self.graph.record(Tensor::from_parts(shape, out), op, &[self.id, w.id, b.id]))
    }

    /// Divides by the Euclidean norm along `axis`.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut norms = Vec::with_capacity(outer * inner);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let n = (0..len).map(|j| xd[at(j)] * xd[at(j)]).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::Degenerate("l2_normalize of a zero vector".into()));
                }
                for j in 0..len {
                    out[at(j)] = xd[at(j)] / n;
                }
                norms.push(n);
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph.record(out, Op::L2Normalize { x: self.id, axis, norms }, &[self.id]))
    }

    /// Zeroes the entries where `keep` is false in the forward pass while
    /// passing the gradient through unchanged everywhere.
    pub fn straight_through_mask(&self, keep: &[bool]) -> Result<Var<'g>> {
        let x = self.value();
        if keep.len() != x.len() {
            return dim_err(format!("mask of {} for tensor {:?}", keep.len(), x.shape()));
        }
        let data = x.data().iter().zip(keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.graph.record(out, Op::StraightThrough { x: self.id }, &[self.id]))
    }

    /// Mean binary cross-entropy between `self` (logits) and `targets`.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var<'g>> {
        let l = self.value();
        if l.shape() != targets.shape() {
            return dim_err(format!("bce logits {:?} vs targets {:?}", l.shape(), targets.shape()));
        }
        let total: f64 = l.data().iter().zip(targets.data()).map(|(&l, &t)| bce_term(l, t)).sum();
        let out = Tensor::scalar(total / l.len() as f64);
        let op = Op::BceWithLogits { logits: self.id, targets: Rc::new(targets.clone()) };
        Ok(self.graph.record(out, op, &[self.id]))
    }
}
