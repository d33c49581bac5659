//! Reverse-mode differentiation over a fixed vocabulary of primitives.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::scalar::Scalar;
use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Boolean matrix used to restrict softmax rows (`true` = may attend).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, cells: Vec<bool>) -> Self {
        assert_eq!(rows * cols, cells.len());
        Self { rows, cols, cells }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, cells }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.cells[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.cells[r * self.cols..(r + 1) * self.cols]
    }
}

/// Named trainable tensors. Parameter ids are stable insertion indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::dim("param set", cur.shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    params: Vec<Option<Tensor<S>>>,
    leaves: BTreeMap<NodeId, Tensor<S>>,
    visited: Vec<NodeId>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self {
            params: store
                .iter()
                .map(|(_, _, v)| Some(Tensor::zeros(v.shape())))
                .collect(),
            leaves: BTreeMap::new(),
            visited: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf node (constants included).
    pub fn node(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.leaves.get(&id)
    }

    /// Nodes in the order the backward pass visited them.
    pub fn visited(&self) -> &[NodeId] {
        &self.visited
    }

    /// `self += scale * other` over parameter gradients.
    pub fn accumulate(&mut self, other: &Gradients<S>, scale: S) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.axpy(scale, src).expect("same shape"),
                    None => *dst = Some(src.scale(scale)),
                }
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.params.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * c;
            }
        }
    }

    pub fn global_norm(&self) -> S {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x * x)
            .sum::<S>()
            .sqrt()
    }
}

enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Softmax(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<S> },
    Gelu(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Rotate { x: NodeId, cos: Arc<Tensor<S>>, sin: Arc<Tensor<S>> },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Tensor<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    param: Option<ParamId>,
}

/// Recorded computation. Values are computed eagerly as nodes are added.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + S::of(GELU_K) * x * x * x);
    S::of(0.5) * x * (S::one() + u.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + S::of(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = c * (S::one() + S::of(3.0 * GELU_K) * x * x);
    S::of(0.5) * (S::one() + th) + S::of(0.5) * x * (S::one() - th * th) * du
}

/// Whether `b` broadcasts over the rows of `a`.
fn row_broadcast<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(true)
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn broadcast_zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let cols = a.cols();
    let bd = b.data();
    let data = if b.numel() == a.numel() {
        a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % cols]))
            .collect()
    };
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn col_sums<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let cols = t.cols();
    let mut out = vec![S::zero(); cols];
    for r in 0..t.rows() {
        for (o, &v) in out.iter_mut().zip(t.row(r)) {
            *o = *o + v;
        }
    }
    Tensor::new(vec![1, cols], out).expect("shape")
}

fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
    match &mut grads[id.0] {
        Some(cur) => {
            for (c, v) in cur.data_mut().iter_mut().zip(g.data()) {
                *c = *c + *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced");
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a trainable parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Leaf);
        self.nodes[n.0].param = Some(id);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a x b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        row_broadcast("add", self.value(a), self.value(b))?;
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        row_broadcast("sub", self.value(a), self.value(b))?;
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        row_broadcast("mul", self.value(a), self.value(b))?;
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// Row-wise softmax. Entries where `mask` is false receive exactly zero
    /// weight; a row with no allowed entry is all zeros.
    pub fn softmax(&mut self, x: NodeId, mask: Option<&BoolMatrix>) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::dim("softmax mask", xv.shape(), &[m.rows(), m.cols()]));
            }
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let src = xv.row(r);
            let allowed = |c: usize| mask.is_none_or(|m| m.get(r, c));
            let mut mx = S::neg_infinity();
            for (c, &v) in src.iter().enumerate() {
                if allowed(c) && v > mx {
                    mx = v;
                }
            }
            if mx == S::neg_infinity() {
                continue;
            }
            let dst = out.row_mut(r);
            let mut total = S::zero();
            for c in 0..cols {
                if allowed(c) {
                    let e = (src[c] - mx).exp();
                    dst[c] = e;
                    total = total + e;
                }
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: NodeId, eps: S) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let n = S::of(cols as f64);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let src = xv.row(r);
            let mean = src.iter().copied().sum::<S>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            for (d, &v) in out.row_mut(r).iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            data.extend_from_slice(xv.row(i));
        }
        let v = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", &[rows, cols], v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::dim("slice_cols", xv.shape(), &[start, len]));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let v = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", &[rows, cols], v.shape()));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Rotates consecutive column pairs `(x0, x1)` of each row by the angle
    /// whose cosine/sine are given per `(row, pair)`.
    pub fn rotate_pairs(
        &mut self,
        x: NodeId,
        cos: Arc<Tensor<S>>,
        sin: Arc<Tensor<S>>,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.cols().is_multiple_of(2) || cos.rows() != xv.rows() || cos.cols() * 2 != xv.cols() {
            return Err(Error::dim("rotate_pairs", xv.shape(), cos.shape()));
        }
        let v = rotate(xv, &cos, &sin, false);
        Ok(self.push(v, Op::Rotate { x, cos, sin }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean squared difference between `pred` and a constant `target`.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor<S>) -> Result<NodeId> {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = Tensor::zeros(&[rows, cols]);
        let mut nll = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::Index { index: t, len: cols });
            }
            let src = lv.row(r);
            let mx = src.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = src.iter().map(|&v| (v - mx).exp()).sum::<S>().ln() + mx;
            nll = nll + lse - src[t];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(src) {
                *p = (v - lse).exp();
            }
        }
        let loss = nll / S::of(rows.max(1) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        let n_params = self.param_nodes.keys().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut out = Gradients {
            params: vec![None; n_params],
            leaves: BTreeMap::new(),
            visited: Vec::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            out.visited.push(NodeId(i));
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(p) = node.param {
                        out.params[p.0] = Some(g.clone());
                    }
                    out.leaves.insert(NodeId(i), g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.t_matmul(self.value(*a))?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    let bv = self.value(*b);
                    let mut db = if bv.numel() == g.numel() {
                        g.clone()
                    } else {
                        col_sums(&g)
                    };
                    if neg {
                        db = db.scale(-S::one());
                    }
                    let db = db.reshape(bv.shape())?;
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = broadcast_zip(&g, bv, |x, y| x * y);
                    let gb = g.zip_map(av, |x, y| x * y)?;
                    let db = if bv.numel() == gb.numel() {
                        gb
                    } else {
                        col_sums(&gb)
                    }
                    .reshape(bv.shape())?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c)),
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - inner);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = S::of(y.cols() as f64);
                    let mut dx = Tensor::zeros(y.shape());
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mg = gr.iter().copied().sum::<S>() / n;
                        let mgy = dot(yr, gr) / n;
                        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = is * (gv - mg - yv * mgy);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let dx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv))?;
                    acc(&mut grads, *x, dx);
                }
                Op::Embedding { table: src, ids } | Op::GatherRows { x: src, idx: ids } => {
                    let sv = self.value(*src);
                    let mut dt = Tensor::zeros(sv.shape());
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, &v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d = *d + v;
                        }
                    }
                    acc(&mut grads, *src, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let len = pv.numel();
                        let d = Tensor::new(
                            pv.shape().to_vec(),
                            g.data()[start..start + len].to_vec(),
                        )?;
                        start += len;
                        acc(&mut grads, p, d);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let len = g.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut d = Tensor::zeros(pv.shape());
                        for r in 0..pv.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(&mut grads, p, d);
                    }
                }
                Op::Rotate { x, cos, sin } => acc(&mut grads, *x, rotate(&g, cos, sin, true)),
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, Tensor::full(xv.shape(), g.item()));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let c = g.item() / S::of(xv.numel() as f64);
                    acc(&mut grads, *x, Tensor::full(xv.shape(), c));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = g.item() / S::of(targets.len().max(1) as f64);
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = d.row_mut(r);
                        row[t] = row[t] - S::one();
                        for v in row.iter_mut() {
                            *v = *v * c;
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
            }
        }
        Ok(out)
    }
}

fn rotate<S: Scalar>(x: &Tensor<S>, cos: &Tensor<S>, sin: &Tensor<S>, inverse: bool) -> Tensor<S> {
    let mut out = Tensor::zeros(x.shape());
    let half = x.cols() / 2;
    for r in 0..x.rows() {
        let (src, c, s) = (x.row(r), cos.row(r), sin.row(r));
        let dst = out.row_mut(r);
        for j in 0..half {
            let (a, b) = (src[2 * j], src[2 * j + 1]);
            let sn = if inverse { -s[j] } else { s[j] };
            dst[2 * j] = a * c[j] - b * sn;
            dst[2 * j + 1] = a * sn + b * c[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[vec![1.0, -2.0, 3.0]]));
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let loss = g.sum(wn);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[vec![1.0, 2.0]]));
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let sq = g.mul(wn, wn).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_node_once_in_reverse_order() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[vec![1.0, 2.0]]));
        let b = g.mul(a, a).unwrap();
        let c = g.add(b, a).unwrap();
        let d = g.gelu(c);
        let e = g.add(d, b).unwrap();
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        let order: Vec<usize> = grads.visited().iter().map(|n| n.index()).collect();
        let mut sorted = order.clone();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        sorted.dedup();
        assert_eq!(order, sorted);
        assert_eq!(order.len(), 6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let mut rng = Rng::new(4);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rng.normal_tensor(&[5, 7]).scale(3.0));
        let mask = BoolMatrix::from_fn(5, 7, |r, c| c <= r + 1);
        let y = g.softmax(x, Some(&mask)).unwrap();
        let yv = g.value(y);
        for r in 0..5 {
            let s: f64 = yv.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for c in 0..7 {
                if !mask.get(r, c) {
                    assert_eq!(yv.at(r, c), 0.0);
                }
            }
        }
        let none = BoolMatrix::from_fn(1, 3, |_, _| false);
        let z = g.constant(t(&[vec![1.0, 2.0, 3.0]]));
        let zs = g.softmax(z, Some(&none)).unwrap();
        assert_eq!(g.value(zs).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = Rng::new(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rng.normal_tensor(&[6, 32]).map(|v| 4.0 * v + 3.0));
        let y = g.layer_norm(x, 0.0);
        let yv = g.value(y);
        for r in 0..6 {
            let row = yv.row(r);
            let m: f64 = row.iter().sum::<f64>() / 32.0;
            let v: f64 = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[3, 10]));
        let ce = g.cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_rotation() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![1.0, 0.0]]));
        let half_pi = std::f64::consts::FRAC_PI_2;
        let cos = Arc::new(t(&[vec![half_pi.cos()]]));
        let sin = Arc::new(t(&[vec![half_pi.sin()]]));
        let y = g.rotate_pairs(x, cos, sin).unwrap();
        let yv = g.value(y);
        assert!((yv.at(0, 0) - 0.0).abs() < 1e-12);
        assert!((yv.at(0, 1) - 1.0).abs() < 1e-12);
    }
}
