//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to tracked values during a
//! forward pass. [`backward`] walks the record in reverse and accumulates
//! gradients for every tracked leaf. Nodes are appended in evaluation order,
//! so reverse insertion order is a valid reverse topological order.
//!
//! Constants and frozen parameters are recorded untracked: gradients flow
//! *through* operations that consume them but are never accumulated for them.
//!
//! Non-differentiable points: `min`/`max` route the whole gradient to the
//! selected entry (lowest index on ties), `sqrt` requires strictly positive
//! input.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::fault;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Expand(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Sqrt(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, Vec<f64>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    FrobSq(NodeId),
    CrossEntropy(NodeId, Tensor, Vec<usize>),
    Select(NodeId, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Record of one forward pass. Create one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, NodeId>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id.0, self.value())
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
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_shared(Arc::new(value), op, tracked))
    }

    fn push_shared(&self, value: Arc<Tensor>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: NodeId(nodes.len() - 1),
        }
    }

    /// Untracked value: no gradient is ever accumulated for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        assert!(value.is_finite(), "constant must be finite");
        self.push_shared(Arc::new(value), Op::Leaf, false)
    }

    /// Tracked leaf with no parameter binding; used by gradient checks.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        assert!(value.is_finite(), "variable must be finite");
        self.push_shared(Arc::new(value), Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Tracked iff the parameter is trainable.
    /// Repeated calls for the same id return the same node so gradients
    /// from every use accumulate in one place.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let var = self.push_shared(p.shared(), Op::Leaf, p.trainable);
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &*nodes[p.id.0].value).collect();
            let tracked = parts.iter().any(|p| nodes[p.id.0].tracked);
            (Tensor::concat_rows(&vals)?, tracked)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(value, Op::ConcatRows(ids), tracked, "concat_rows")
    }

    fn value_of(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].tracked
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id.0].value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.push_shared(v, Op::Leaf, false)
    }

    fn unary(
        self,
        name: &'static str,
        f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let (value, op) = f(&x)?;
        self.tape.push(value, op, self.is_tracked(), name)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let (a, b) = (self.value(), other.value());
        let value = f(&a, &b)?;
        let tracked = self.is_tracked() || other.is_tracked();
        self.tape.push(value, op, tracked, name)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "matmul", |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("transpose", |x| Ok((x.transpose(), Op::Transpose(id))))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a.add(b), Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a.sub(b), Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "mul",
            |a, b| a.zip_map(b, "mul", |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "div",
            |a, b| a.zip_map(b, "div", |x, y| x / y),
            Op::Div(self.id, other.id),
        )
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            "add_row",
            |a, r| {
                if r.rows() != 1 || r.cols() != a.cols() {
                    return Err(mismatch("add_row", a, r));
                }
                let mut out = a.clone();
                for chunk in out.data_mut().chunks_mut(r.cols()) {
                    for (o, v) in chunk.iter_mut().zip(r.data()) {
                        *o += v;
                    }
                }
                Ok(out)
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Scales each column by the matching entry of a `1×n` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            "mul_row",
            |a, r| {
                if r.rows() != 1 || r.cols() != a.cols() {
                    return Err(mismatch("mul_row", a, r));
                }
                let mut out = a.clone();
                for chunk in out.data_mut().chunks_mut(r.cols()) {
                    for (o, v) in chunk.iter_mut().zip(r.data()) {
                        *o *= v;
                    }
                }
                Ok(out)
            },
            Op::MulRow(self.id, row.id),
        )
    }

    /// Scales row `i` by entry `i` of an `m×1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            col,
            "mul_col",
            |a, c| {
                if c.cols() != 1 || c.rows() != a.rows() {
                    return Err(mismatch("mul_col", a, c));
                }
                let mut out = a.clone();
                let cols = a.cols();
                for (chunk, &k) in out.data_mut().chunks_mut(cols).zip(c.data()) {
                    for o in chunk.iter_mut() {
                        *o *= k;
                    }
                }
                Ok(out)
            },
            Op::MulCol(self.id, col.id),
        )
    }

    /// Broadcasts a `1×1` scalar to `rows×cols`.
    pub fn expand(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("expand", |x| {
            if x.shape() != (1, 1) {
                return Err(TensorError::NotScalar {
                    rows: x.rows(),
                    cols: x.cols(),
                });
            }
            Ok((Tensor::full(rows, cols, x.item()), Op::Expand(id)))
        })
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("scale", |x| Ok((x.scale(k), Op::Scale(id, k))))
    }

    /// Adds a constant to every entry.
    pub fn offset(self, k: f64) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("offset", |x| Ok((x.map(|v| v + k), Op::Offset(id))))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("sigmoid", |x| Ok((x.map(sigmoid), Op::Sigmoid(id))))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("gelu", |x| Ok((x.map(gelu), Op::Gelu(id))))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("sqrt", |x| {
            if x.data().iter().any(|&v| v <= 0.0) {
                return Err(TensorError::Contract("sqrt of non-positive value".into()));
            }
            Ok((x.map(f64::sqrt), Op::Sqrt(id)))
        })
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("softmax_rows", |x| Ok((softmax_rows(x), Op::SoftmaxRows(id))))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(self, eps: f64) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("layer_norm_rows", |x| {
            let cols = x.cols();
            let mut out = x.clone();
            let mut inv_std = Vec::with_capacity(x.rows());
            for row in out.data_mut().chunks_mut(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
                inv_std.push(inv);
            }
            Ok((out, Op::LayerNormRows(id, inv_std)))
        })
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("slice_rows", |x| Ok((x.slice_rows(start, end)?, Op::SliceRows(id, start))))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("slice_cols", |x| {
            if start >= end || end > x.cols() {
                return Err(TensorError::Index {
                    op: "slice_cols",
                    index: end,
                    extent: x.cols(),
                });
            }
            let out = Tensor::from_fn(x.rows(), end - start, |r, c| x.get(r, start + c));
            Ok((out, Op::SliceCols(id, start)))
        })
    }

    /// Stacks the listed rows (repeats allowed) into a new matrix.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("gather_rows", |x| {
            if indices.is_empty() {
                return Err(TensorError::Contract("gather_rows needs at least one index".into()));
            }
            let mut data = Vec::with_capacity(indices.len() * x.cols());
            for &i in indices {
                if i >= x.rows() {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        extent: x.rows(),
                    });
                }
                data.extend_from_slice(x.row(i));
            }
            let out = Tensor::new(indices.len(), x.cols(), data)?;
            Ok((out, Op::GatherRows(id, indices.to_vec())))
        })
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("reshape", |x| Ok((x.reshape(rows, cols)?, Op::Reshape(id))))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("sum", |x| Ok((Tensor::scalar(x.sum()), Op::Sum(id))))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("mean", |x| Ok((Tensor::scalar(x.sum() / x.len() as f64), Op::Mean(id))))
    }

    /// Row sums as an `m×1` column.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("sum_rows", |x| Ok((x.sum_rows(), Op::SumRows(id))))
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("frob_sq", |x| Ok((Tensor::scalar(x.frob_sq()), Op::FrobSq(id))))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `self`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let id = self.id;
        self.unary("cross_entropy", |x| {
            if labels.len() != x.rows() {
                return Err(TensorError::Contract(format!(
                    "cross_entropy: {} labels for {} rows",
                    labels.len(),
                    x.rows()
                )));
            }
            let probs = softmax_rows(x);
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                if y >= x.cols() {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: y,
                        extent: x.cols(),
                    });
                }
                let row = x.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            let loss = (total / x.rows() as f64).max(0.0);
            Ok((Tensor::scalar(loss), Op::CrossEntropy(id, probs, labels.to_vec())))
        })
    }

    /// Smallest entry; gradient goes to the first minimal position.
    pub fn min(self) -> Result<Var<'t>> {
        self.select("min", |a, b| a < b)
    }

    /// Largest entry; gradient goes to the first maximal position.
    pub fn max(self) -> Result<Var<'t>> {
        self.select("max", |a, b| a > b)
    }

    fn select(self, name: &'static str, better: fn(f64, f64) -> bool) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(name, |x| {
            let mut best = 0;
            for (i, &v) in x.data().iter().enumerate() {
                if better(v, x.data()[best]) {
                    best = i;
                }
            }
            Ok((Tensor::scalar(x.data()[best]), Op::Select(id, best)))
        })
    }
}

/// Gradients produced by [`backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, NodeId>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if `var` is tracked and
    /// reachable.
    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(&id)
            .and_then(|node| self.grads[node.0].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(&p, node)| self.grads[node.0].as_ref().map(|g| (p, g)))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, g: Tensor) {
    if !nodes[id.0].tracked {
        return;
    }
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Reverse sweep from a scalar root.
pub fn backward(root: Var<'_>) -> Result<Gradients> {
    let tape = root.tape;
    let nodes = tape.nodes.borrow();
    let root_val = &nodes[root.id.0].value;
    if root_val.shape() != (1, 1) {
        return Err(TensorError::NotScalar {
            rows: root_val.rows(),
            cols: root_val.cols(),
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    if nodes[root.id.0].tracked {
        grads[root.id.0] = Some(Tensor::scalar(1.0));
    }
    for idx in (0..=root.id.0).rev() {
        let node = &nodes[idx];
        if !node.tracked {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        let out = &node.value;
        let val = |id: &NodeId| &*nodes[id.0].value;
        let is_tracked = |id: &NodeId| nodes[id.0].tracked;
        match &node.op {
            Op::Leaf => {
                grads[idx] = Some(g);
                continue;
            }
            Op::MatMul(a, b) => {
                if is_tracked(a) {
                    let ga = g.matmul(&val(b).transpose())?;
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                if is_tracked(b) {
                    let gb = val(a).transpose().matmul(&g)?;
                    accumulate(&mut grads, &nodes, *b, gb);
                }
            }
            Op::Transpose(a) => accumulate(&mut grads, &nodes, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(&mut grads, &nodes, *b, g.clone());
                accumulate(&mut grads, &nodes, *a, g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, &nodes, *b, g.scale(-1.0));
                accumulate(&mut grads, &nodes, *a, g);
            }
            Op::Mul(a, b) => {
                if is_tracked(a) {
                    accumulate(&mut grads, &nodes, *a, g.zip_map(val(b), "mul", |x, y| x * y)?);
                }
                if is_tracked(b) {
                    accumulate(&mut grads, &nodes, *b, g.zip_map(val(a), "mul", |x, y| x * y)?);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                if is_tracked(a) {
                    accumulate(&mut grads, &nodes, *a, g.zip_map(bv, "div", |x, y| x / y)?);
                }
                if is_tracked(b) {
                    let gb = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                        -g.get(r, c) * av.get(r, c) / (bv.get(r, c) * bv.get(r, c))
                    });
                    accumulate(&mut grads, &nodes, *b, gb);
                }
            }
            Op::AddRow(a, r) => {
                if is_tracked(r) {
                    accumulate(&mut grads, &nodes, *r, g.sum_cols());
                }
                accumulate(&mut grads, &nodes, *a, g);
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(a), val(r));
                if is_tracked(r) {
                    let gr = g.zip_map(av, "mul_row", |x, y| x * y)?.sum_cols();
                    accumulate(&mut grads, &nodes, *r, gr);
                }
                if is_tracked(a) {
                    let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * rv.get(0, j));
                    accumulate(&mut grads, &nodes, *a, ga);
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (val(a), val(c));
                if is_tracked(c) {
                    let gc = g.zip_map(av, "mul_col", |x, y| x * y)?.sum_rows();
                    accumulate(&mut grads, &nodes, *c, gc);
                }
                if is_tracked(a) {
                    let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * cv.get(i, 0));
                    accumulate(&mut grads, &nodes, *a, ga);
                }
            }
            Op::Expand(a) => accumulate(&mut grads, &nodes, *a, Tensor::scalar(g.sum())),
            Op::Scale(a, k) => accumulate(&mut grads, &nodes, *a, g.scale(*k)),
            Op::Offset(a) => accumulate(&mut grads, &nodes, *a, g),
            Op::Sigmoid(a) => {
                let sign = fault::sigmoid_backward_sign();
                let ga = g.zip_map(out, "sigmoid", |gv, y| sign * gv * y * (1.0 - y))?;
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(val(a), "gelu", |gv, x| gv * gelu_grad(x))?;
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = g.zip_map(out, "sqrt", |gv, y| gv * 0.5 / y)?;
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::LayerNormRows(a, inv_std) => {
                let cols = out.cols();
                let n = cols as f64;
                let mut ga = g.clone();
                for ((grow, yrow), inv) in ga
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(inv_std)
                {
                    let mean_g = grow.iter().sum::<f64>() / n;
                    let mean_gy = grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / n;
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = inv * (*gv - mean_g - y * mean_gy);
                    }
                }
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(p).rows();
                    if is_tracked(p) {
                        accumulate(&mut grads, &nodes, *p, g.slice_rows(start, start + rows)?);
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let off = start * av.cols();
                ga.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, start + c, g.get(r, c));
                    }
                }
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::GatherRows(a, indices) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let cols = av.cols();
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in ga.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = val(a).shape();
                accumulate(&mut grads, &nodes, *a, g.reshape(r, c)?);
            }
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                accumulate(&mut grads, &nodes, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(a).shape();
                let k = g.item() / (r * c) as f64;
                accumulate(&mut grads, &nodes, *a, Tensor::full(r, c, k));
            }
            Op::SumRows(a) => {
                let (r, c) = val(a).shape();
                let ga = Tensor::from_fn(r, c, |i, _| g.get(i, 0));
                accumulate(&mut grads, &nodes, *a, ga);
            }
            Op::FrobSq(a) => {
                let k = 2.0 * g.item();
                accumulate(&mut grads, &nodes, *a, val(a).scale(k));
            }
            Op::CrossEntropy(a, probs, labels) => {
                let scale = g.item() / labels.len() as f64;
                let mut ga = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let v = ga.get(r, y);
                    ga.set(r, y, v - 1.0);
                }
                accumulate(&mut grads, &nodes, *a, ga.scale(scale));
            }
            Op::Select(a, index) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                ga.data_mut()[*index] = g.item();
                accumulate(&mut grads, &nodes, *a, ga);
            }
        }
    }
    let params = tape.params.borrow().clone();
    Ok(Gradients { grads, params })
}
