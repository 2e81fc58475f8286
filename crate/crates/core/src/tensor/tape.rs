//! Reverse-mode gradient tape over [`Matrix`] values.
//!
//! Operations on [`Var`] handles evaluate eagerly and append a node to the
//! tape. [`Var::backward`] replays the nodes in reverse from a 1×1 loss and
//! returns one gradient per node. Nodes that depend on no parameter are
//! skipped during the backward sweep.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::matrix::{matmul_nt_raw, matmul_tn_raw, Matrix};
use super::ops::{self, Activation, BCE_EPS};
use super::TensorError;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBias(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Activate(usize, Activation),
    Softmax(usize, Option<Rc<[bool]>>),
    RowAverage(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    BroadcastRows(usize),
    ScaleRows(usize, usize),
    RowwiseDot(usize, usize),
    Bce(usize, Matrix),
    Sum(usize),
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records executed operations for one logical thread of execution.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable parameter.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows<'t>(&'t self, table: Var<'t>, indices: &[usize]) -> Result<Var<'t>, TensorError> {
        let nodes = self.nodes.borrow();
        let t = &nodes[table.id].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(TensorError::ShapeMismatch { op: "gather_rows", left: t.shape(), right: (bad, 0) });
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::from_vec_unchecked(indices.len(), t.cols(), data);
        let needs = nodes[table.id].needs_grad;
        drop(nodes);
        Ok(self.push(value, Op::GatherRows(table.id, indices.to_vec()), needs))
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn record(&self, value: Matrix, op: Op, inputs: &[usize]) -> Var<'_> {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrows the recorded value.
    pub fn value(&self) -> Ref<'t, Matrix> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self) -> Result<f64, TensorError> {
        let v = self.value();
        if v.shape() != (1, 1) {
            return Err(TensorError::NotScalar { shape: v.shape() });
        }
        Ok(v.get(0, 0))
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let value = ops::matmul(&self.value(), &rhs.value())?;
        Ok(self.tape.record(value, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().transpose();
        self.tape.record(value, Op::Transpose(self.id), &[self.id])
    }

    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&bias);
        let value = ops::add_row_bias(&self.value(), &bias.value())?;
        Ok(self.tape.record(value, Op::AddRowBias(self.id, bias.id), &[self.id, bias.id]))
    }

    /// `self · w + b`.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
        {
            let (wv, bv) = (w.value(), b.value());
            if bv.rows() != 1 || bv.cols() != wv.cols() {
                return Err(TensorError::ShapeMismatch { op: "affine", left: wv.shape(), right: bv.shape() });
            }
        }
        self.matmul(w)?.add_row_bias(b)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let value = {
            let (a, b) = (self.value(), rhs.value());
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch { op: "add", left: a.shape(), right: b.shape() });
            }
            let mut out = a.clone();
            out.add_assign(&b);
            out
        };
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "add" });
        }
        Ok(self.tape.record(value, Op::Add(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, TensorError> {
        let value = self.value().map(|v| v * c);
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        Ok(self.tape.record(value, Op::Scale(self.id, c), &[self.id]))
    }

    pub fn activate(self, kind: Activation) -> Result<Var<'t>, TensorError> {
        if kind == Activation::Identity {
            return Ok(self);
        }
        let value = ops::apply_activation(kind, &self.value())?;
        Ok(self.tape.record(value, Op::Activate(self.id, kind), &[self.id]))
    }

    pub fn softmax_masked(self, mask: Option<Rc<[bool]>>) -> Result<Var<'t>, TensorError> {
        let value = ops::row_softmax_masked(&self.value(), mask.as_deref())?;
        Ok(self.tape.record(value, Op::Softmax(self.id, mask), &[self.id]))
    }

    pub fn row_average(self) -> Result<Var<'t>, TensorError> {
        let value = ops::row_average(&self.value())?;
        Ok(self.tape.record(value, Op::RowAverage(self.id), &[self.id]))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyAxis { op: "concat_cols" })?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Matrix> = vals.iter().map(|r| &**r).collect();
            ops::concat_cols(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(value, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyAxis { op: "concat_rows" })?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Matrix> = vals.iter().map(|r| &**r).collect();
            ops::concat_rows(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(value, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Repeats a single-row matrix `n` times.
    pub fn broadcast_rows(self, n: usize) -> Result<Var<'t>, TensorError> {
        let value = {
            let v = self.value();
            if v.rows() != 1 {
                return Err(TensorError::ShapeMismatch { op: "broadcast_rows", left: v.shape(), right: (1, v.cols()) });
            }
            let mut data = Vec::with_capacity(n * v.cols());
            for _ in 0..n {
                data.extend_from_slice(v.as_slice());
            }
            Matrix::from_vec_unchecked(n, v.cols(), data)
        };
        Ok(self.tape.record(value, Op::BroadcastRows(self.id), &[self.id]))
    }

    pub fn scale_rows(self, scale: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&scale);
        let value = ops::scale_rows(&self.value(), &scale.value())?;
        Ok(self.tape.record(value, Op::ScaleRows(self.id, scale.id), &[self.id, scale.id]))
    }

    pub fn rowwise_dot(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let value = ops::rowwise_dot(&self.value(), &rhs.value())?;
        Ok(self.tape.record(value, Op::RowwiseDot(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Summed binary cross-entropy against fixed targets, as a 1×1 node.
    pub fn bce_sum(self, targets: &Matrix) -> Result<Var<'t>, TensorError> {
        let loss = ops::bce_sum(&self.value(), targets)?;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "bce_sum" });
        }
        let value = Matrix::from_vec_unchecked(1, 1, vec![loss]);
        Ok(self.tape.record(value, Op::Bce(self.id, targets.clone()), &[self.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Matrix::from_vec_unchecked(1, 1, vec![self.value().sum()]);
        self.tape.record(value, Op::Sum(self.id), &[self.id])
    }

    /// Reverse sweep from this 1×1 node.
    pub fn backward(&self) -> Result<Gradients, TensorError> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.shape() != (1, 1) {
            return Err(TensorError::NotScalar { shape: root.value.shape() });
        }
        let mut grads: Vec<Option<Matrix>> = (0..=self.id).map(|_| None).collect();
        grads[self.id] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes: nodes[..=self.id].iter().map(|n| n.value.shape()).collect() })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node], id: usize, g: Matrix) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(grads, nodes, *a, matmul_nt_raw(g, val(*b)));
            }
            if nodes[*b].needs_grad {
                accumulate(grads, nodes, *b, matmul_tn_raw(val(*a), g));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::AddRowBias(x, b) => {
            accumulate(grads, nodes, *x, g.clone());
            if nodes[*b].needs_grad {
                accumulate(grads, nodes, *b, column_sums(g));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.map(|v| v * c)),
        Op::Activate(a, kind) => {
            let x = val(*a);
            let y = &node.value;
            let data = g
                .as_slice()
                .iter()
                .zip(x.as_slice().iter().zip(y.as_slice()))
                .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                .collect();
            accumulate(grads, nodes, *a, Matrix::from_vec_unchecked(x.rows(), x.cols(), data));
        }
        Op::Softmax(a, mask) => {
            let y = &node.value;
            let mut out = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                let live = |j: usize| mask.as_ref().is_none_or(|m| m[j]);
                for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                    if live(j) {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::RowAverage(a) => {
            let x = val(*a);
            let n = x.cols() as f64;
            let mut out = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let gv = g.get(r, 0) / n;
                out.row_mut(r).iter_mut().for_each(|o| *o = gv);
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::ConcatCols(ids) => {
            let mut offset = 0;
            for &id in ids {
                let (rows, cols) = val(id).shape();
                if nodes[id].needs_grad {
                    let mut part = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(grads, nodes, id, part);
                }
                offset += cols;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let (rows, cols) = val(id).shape();
                if nodes[id].needs_grad {
                    let data = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(grads, nodes, id, Matrix::from_vec_unchecked(rows, cols, data));
                }
                offset += rows;
            }
        }
        Op::BroadcastRows(a) => accumulate(grads, nodes, *a, column_sums(g)),
        Op::ScaleRows(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            if nodes[*x].needs_grad {
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let k = sv.get(r, 0);
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= k);
                }
                accumulate(grads, nodes, *x, gx);
            }
            if nodes[*s].needs_grad {
                let data = (0..xv.rows()).map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum()).collect();
                accumulate(grads, nodes, *s, Matrix::from_vec_unchecked(xv.rows(), 1, data));
            }
        }
        Op::RowwiseDot(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let scaled = |m: &Matrix| {
                let mut out = m.clone();
                for r in 0..out.rows() {
                    let k = g.get(r, 0);
                    out.row_mut(r).iter_mut().for_each(|v| *v *= k);
                }
                out
            };
            if nodes[*a].needs_grad {
                accumulate(grads, nodes, *a, scaled(bv));
            }
            if nodes[*b].needs_grad {
                accumulate(grads, nodes, *b, scaled(av));
            }
        }
        Op::Bce(p, z) => {
            let pv = val(*p);
            let gv = g.get(0, 0);
            let data =
                pv.as_slice()
                    .iter()
                    .zip(z.as_slice())
                    .map(|(&p, &z)| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            0.0
                        } else {
                            gv * (-z / p + (1.0 - z) / (1.0 - p))
                        }
                    })
                    .collect();
            accumulate(grads, nodes, *p, Matrix::from_vec_unchecked(pv.rows(), pv.cols(), data));
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Matrix::filled(r, c, g.get(0, 0)));
        }
        Op::GatherRows(table, idx) => {
            let t = val(*table);
            let mut out = Matrix::zeros(t.rows(), t.cols());
            for (i, &row) in idx.iter().enumerate() {
                for (o, gv) in out.row_mut(row).iter_mut().zip(g.row(i)) {
                    *o += gv;
                }
            }
            accumulate(grads, nodes, *table, out);
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Matrix::from_vec_unchecked(1, g.cols(), out)
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`; all zeros when the loss does not
    /// depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Matrix {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn shape_of(&self, id: usize) -> Option<(usize, usize)> {
        self.shapes.get(id).copied()
    }
}
