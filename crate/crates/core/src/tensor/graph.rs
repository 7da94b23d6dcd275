//! Tape-style reverse-mode automatic differentiation over matrices.
//!
//! Nodes are appended in evaluation order, so a node's parents always have
//! smaller ids and the tape is acyclic by construction. Parameters are not
//! copied into the graph: parameter leaves borrow the [`ParamStore`] and their
//! gradients are accumulated into a [`Gradients`] buffer by [`Graph::backward`].

use std::collections::HashMap;

use super::{gemm, Gradients, ParamStore, Rng, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position on the tape; indexes the output of [`Graph::backward_nodes`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(usize),
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    MaskMul(NodeId, Vec<T>),
    Blend(NodeId, NodeId, Vec<T>),
    AddConst(NodeId),
    StepScores(NodeId, NodeId),
    StepWeighted(NodeId, NodeId),
    CrossEntropy(NodeId, Vec<Option<usize>>, Tensor<T>),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A computation tape. Borrow-scoped to the parameters it reads.
pub struct Graph<'p, T> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let (arg, max) =
            row.iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                });
        // the max term contributes exactly 1; ln_1p keeps tiny remainders
        let rest: T = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let log_z = rest.ln_1p();
        for v in row.iter_mut() {
            *v = (*v - max) - log_z;
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph reading parameters from `params`.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph without parameters; only constants and `variable` leaves.
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => self
                .params
                .expect("parameter node without a store")
                .tensor(*i),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        id
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_with(value, Op::Leaf, false)
    }

    /// Leaf that records its gradient; read it back with [`Graph::backward_nodes`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push_with(value, Op::Leaf, true)
    }

    /// Leaf for parameter `index` of the bound store. Repeated calls return the
    /// same node so its gradient is accumulated once.
    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&index) {
            return id;
        }
        assert!(
            self.params.is_some_and(|p| index < p.len()),
            "parameter index {index} out of range"
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Param(index),
            needs_grad: true,
        });
        self.param_nodes.insert(index, id);
        id
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let index = self
            .params
            .and_then(|p| p.index_of(name))
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        Ok(self.param(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a` (`n x c`) plus the row vector `b` (`1 x c`) broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(shape_err("add_row", va.shape(), vb.shape()));
        }
        let bias = vb.data();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(bias.len()) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let v = Tensor::from_parts(vec![va.rows(), va.cols()], out);
        Ok(self.push(v, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = map(self.value(a), |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), T::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    v.shape(),
                ));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    v.shape(),
                ));
            }
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / cols;
        let v = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start >= end || end > va.cols() {
            return Err(shape_err("slice_cols", va.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(va.rows() * (end - start));
        for r in 0..va.rows() {
            out.extend_from_slice(&va.row(r)[start..end]);
        }
        let v = Tensor::from_parts(vec![va.rows(), end - start], out);
        Ok(self.push(v, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start >= end || end > va.rows() {
            return Err(shape_err("slice_rows", va.shape(), &[start, end]));
        }
        let c = va.cols();
        let v = Tensor::from_parts(vec![end - start, c], va.data()[start * c..end * c].to_vec());
        Ok(self.push(v, Op::SliceRows(a, start), &[a]))
    }

    /// Rows of `a` picked by `indices` (embedding lookup, beam reordering).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(shape_err("gather_rows", va.shape(), &[bad]));
        }
        if indices.is_empty() {
            return Err(shape_err("gather_rows", va.shape(), &[]));
        }
        let mut out = Vec::with_capacity(indices.len() * va.cols());
        for &i in indices {
            out.extend_from_slice(va.row(i));
        }
        let v = Tensor::from_parts(vec![indices.len(), va.cols()], out);
        Ok(self.push(v, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Identity
    /// otherwise (no node is added).
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut Rng, training: bool) -> NodeId {
        if !training || p <= 0.0 {
            return a;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(v, Op::MaskMul(a, mask), &[a])
    }

    /// Per-row selection: row `r` is `a[r]` where `mask[r] == 1` and `b[r]`
    /// where `mask[r] == 0`.
    pub fn blend(&mut self, a: NodeId, b: NodeId, mask: &[T]) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || mask.len() != va.rows() {
            return Err(shape_err("blend", va.shape(), vb.shape()));
        }
        let c = va.cols();
        let mut out = Vec::with_capacity(va.len());
        for (r, &m) in mask.iter().enumerate() {
            let one_m = T::one() - m;
            out.extend(
                va.row(r)
                    .iter()
                    .zip(vb.row(r))
                    .map(|(&x, &y)| m * x + one_m * y),
            );
        }
        let v = Tensor::from_parts(vec![mask.len(), c], out);
        Ok(self.push(v, Op::Blend(a, b, mask.to_vec()), &[a, b]))
    }

    /// Adds a constant tensor (e.g. an attention mask of large negatives).
    pub fn add_const(&mut self, a: NodeId, c: &Tensor<T>) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(shape_err("add_const", va.shape(), c.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let v = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(v, Op::AddConst(a), &[a]))
    }

    /// Batched dot products against step-major keys.
    ///
    /// `q` is `B x H`, `keys` is `(J*B) x H` with row `j*B + b` holding
    /// position `j` of batch item `b`. Returns `B x J` with
    /// `out[b, j] = q[b] . keys[j*B + b]`.
    pub fn step_scores(&mut self, q: NodeId, keys: NodeId) -> Result<NodeId> {
        let (vq, vk) = (self.value(q), self.value(keys));
        let (b, h) = (vq.rows(), vq.cols());
        if vk.cols() != h || vk.rows() % b != 0 {
            return Err(shape_err("step_scores", vq.shape(), vk.shape()));
        }
        let j = vk.rows() / b;
        let mut out = vec![T::zero(); b * j];
        for bi in 0..b {
            let qr = vq.row(bi);
            for ji in 0..j {
                out[bi * j + ji] = qr
                    .iter()
                    .zip(vk.row(ji * b + bi))
                    .map(|(&x, &y)| x * y)
                    .sum();
            }
        }
        let v = Tensor::from_parts(vec![b, j], out);
        Ok(self.push(v, Op::StepScores(q, keys), &[q, keys]))
    }

    /// Batched weighted sums of step-major values.
    ///
    /// `w` is `B x J`, `vals` is `(J*B) x D`; returns `B x D` with
    /// `out[b] = sum_j w[b, j] * vals[j*B + b]`.
    pub fn step_weighted(&mut self, w: NodeId, vals: NodeId) -> Result<NodeId> {
        let (vw, vv) = (self.value(w), self.value(vals));
        let (b, j) = (vw.rows(), vw.cols());
        if vv.rows() != b * j {
            return Err(shape_err("step_weighted", vw.shape(), vv.shape()));
        }
        let d = vv.cols();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for ji in 0..j {
                let wt = vw.get(bi, ji);
                for (x, &y) in o.iter_mut().zip(vv.row(ji * b + bi)) {
                    *x += wt * y;
                }
            }
        }
        let v = Tensor::from_parts(vec![b, d], out);
        Ok(self.push(v, Op::StepWeighted(w, vals), &[w, vals]))
    }

    /// Summed negative log-likelihood `-log softmax(logits[r])[target[r]]`
    /// over rows whose target is `Some`. Stabilized by max subtraction.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() {
            return Err(shape_err("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let width = vl.cols();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= width) {
            return Err(Error::TokenOutOfRange {
                id: *bad,
                size: width,
            });
        }
        let logp = log_softmax_rows(vl);
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                loss -= logp.get(r, *t);
            }
        }
        let probs = map(&logp, T::exp);
        let v = Tensor::scalar(loss);
        Ok(self.push(
            v,
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Parameter gradients are *added* to `grads`: calling this twice without
    /// zeroing doubles them.
    pub fn backward(&self, loss: NodeId, grads: &mut Gradients<T>) -> Result<()> {
        let node_grads = self.backward_nodes(loss)?;
        for (i, g) in node_grads.into_iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&self.nodes[i].op, g) {
                grads.accumulate(*p, &g);
            }
        }
        Ok(())
    }

    /// Reverse pass returning the gradient of every node that needs one.
    pub fn backward_nodes(&self, loss: NodeId) -> Result<Vec<Option<Tensor<T>>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor<T>>],
        id: NodeId,
    ) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let shape = self.value(id).shape();
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: impl Fn(usize) -> T) {
        if let Some(slot) = self.grad_slot(grads, id) {
            for (k, v) in slot.data_mut().iter_mut().enumerate() {
                *v += f(k);
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = self.value(NodeId(i));
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(m, n, k, gd, false, vb.data(), true, ga.data_mut(), true);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(k, m, n, va.data(), true, gd, false, gb.data_mut(), true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.accumulate_with(grads, *a, |k| gd[k]);
                self.accumulate_with(grads, *b, |k| sign * gd[k]);
            }
            Op::AddRow(a, b) => {
                self.accumulate_with(grads, *a, |k| gd[k]);
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let c = gb.len();
                    for row in gd.chunks(c) {
                        for (x, &y) in gb.data_mut().iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |k| gd[k] * vb[k]);
                self.accumulate_with(grads, *b, |k| gd[k] * va[k]);
            }
            Op::Scale(a, s) => self.accumulate_with(grads, *a, |k| gd[k] * *s),
            Op::Tanh(a) => {
                let y = out.data();
                self.accumulate_with(grads, *a, |k| gd[k] * (T::one() - y[k] * y[k]));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accumulate_with(grads, *a, |k| gd[k] * y[k] * (T::one() - y[k]));
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let y = out.data();
                let dots: Vec<T> = y
                    .chunks(c)
                    .zip(gd.chunks(c))
                    .map(|(yr, gr)| yr.iter().zip(gr).map(|(&p, &q)| p * q).sum())
                    .collect();
                self.accumulate_with(grads, *a, |k| y[k] * (gd[k] - dots[k / c]));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate_with(grads, *a, |_| s);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate_with(grads, *p, |k| gd[(k / w) * total + offset + k % w]);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate_with(grads, *p, |k| gd[offset + k]);
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let w = out.cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let c = ga.cols();
                    for (r, row) in gd.chunks(w).enumerate() {
                        for (x, &y) in ga.data_mut()[r * c + start..r * c + start + w]
                            .iter_mut()
                            .zip(row)
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let off = start * ga.cols();
                    for (x, &y) in ga.data_mut()[off..off + gd.len()].iter_mut().zip(gd) {
                        *x += y;
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let c = ga.cols();
                    for (r, &src) in indices.iter().enumerate() {
                        for (x, &y) in ga.data_mut()[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&gd[r * c..(r + 1) * c])
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::MaskMul(a, mask) => self.accumulate_with(grads, *a, |k| gd[k] * mask[k]),
            Op::Blend(a, b, mask) => {
                let c = out.cols();
                self.accumulate_with(grads, *a, |k| gd[k] * mask[k / c]);
                self.accumulate_with(grads, *b, |k| gd[k] * (T::one() - mask[k / c]));
            }
            Op::AddConst(a) => self.accumulate_with(grads, *a, |k| gd[k]),
            Op::StepScores(q, keys) => {
                let (vq, vk) = (self.value(*q), self.value(*keys));
                let (b, h) = (vq.rows(), vq.cols());
                let j = vk.rows() / b;
                if let Some(gq) = self.grad_slot(grads, *q) {
                    for bi in 0..b {
                        for ji in 0..j {
                            let s = gd[bi * j + ji];
                            for (x, &y) in gq.data_mut()[bi * h..(bi + 1) * h]
                                .iter_mut()
                                .zip(vk.row(ji * b + bi))
                            {
                                *x += s * y;
                            }
                        }
                    }
                }
                if let Some(gk) = self.grad_slot(grads, *keys) {
                    for bi in 0..b {
                        for ji in 0..j {
                            let s = gd[bi * j + ji];
                            let r = ji * b + bi;
                            for (x, &y) in
                                gk.data_mut()[r * h..(r + 1) * h].iter_mut().zip(vq.row(bi))
                            {
                                *x += s * y;
                            }
                        }
                    }
                }
            }
            Op::StepWeighted(w, vals) => {
                let (vw, vv) = (self.value(*w), self.value(*vals));
                let (b, j) = (vw.rows(), vw.cols());
                let d = vv.cols();
                if let Some(gw) = self.grad_slot(grads, *w) {
                    for bi in 0..b {
                        let gr = &gd[bi * d..(bi + 1) * d];
                        for ji in 0..j {
                            let dot: T = gr
                                .iter()
                                .zip(vv.row(ji * b + bi))
                                .map(|(&x, &y)| x * y)
                                .sum();
                            gw.data_mut()[bi * j + ji] += dot;
                        }
                    }
                }
                if let Some(gv) = self.grad_slot(grads, *vals) {
                    for bi in 0..b {
                        let gr = &gd[bi * d..(bi + 1) * d];
                        for ji in 0..j {
                            let wt = vw.get(bi, ji);
                            let r = ji * b + bi;
                            for (x, &y) in gv.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gr) {
                                *x += wt * y;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let s = gd[0];
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let c = gl.cols();
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut gl.data_mut()[r * c..(r + 1) * c];
                        for (x, &p) in row.iter_mut().zip(probs.row(r)) {
                            *x += s * p;
                        }
                        row[*t] -= s;
                    }
                }
            }
        }
    }
}
