//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: a node can only reference nodes created before it.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that depends on a parameter leaf.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::tensor::{self, Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `x[m×n] + b[n]`
    AddRowVec(NodeId, NodeId),
    /// `x[m×n] + b[m]`
    AddColVec(NodeId, NodeId),
    /// `x[m×n] * a[m]` (row `i` scaled by `a[i]`)
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    RowMean(NodeId),
    ColMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    ColVar(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    Concat0(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
    PairwiseDiff(NodeId, NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `node`, or `None` if the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        assert_eq!(node.graph, self.graph, "node from a different graph");
        self.grads[node.index].as_ref()
    }

    /// Gradient of `node`, with zeros where the loss does not depend on it.
    pub fn get_or_zeros(&self, node: NodeId) -> Tensor<T> {
        self.get(node).cloned().unwrap_or_else(|| {
            let shape = self.shapes[node.index].clone();
            let n = shape.iter().product();
            Tensor::from_parts_unchecked(shape, vec![T::zero(); n])
        })
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        None => *slot = Some(Tensor::from_parts_unchecked(shape.to_vec(), delta)),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(TensorError::DetachedNode(id.index));
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        assert_eq!(id.graph, self.id, "node from a different graph");
        &self.nodes[id.index].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|i| self.nodes[i.index].needs_grad);
        self.push(value, op, needs)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = tensor::transpose(self.value(a))?;
        Ok(self.push_op(v, Op::Transpose(a), &[a]))
    }

    fn zip_same(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::mismatch(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts_unchecked(va.shape().to_vec(), data).finite(op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `b[n]` to every row of `x[m×n]`.
    pub fn add_row_vec(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(b)?;
        let (vx, vb) = (self.value(x), self.value(b));
        let (_, n) = vx.dims2("add_row_vec")?;
        if vb.shape() != [n] {
            return Err(TensorError::mismatch("add_row_vec", vx.shape(), vb.shape()));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % n])
            .collect();
        let v = Tensor::from_parts_unchecked(vx.shape().to_vec(), data).finite("add_row_vec")?;
        Ok(self.push_op(v, Op::AddRowVec(x, b), &[x, b]))
    }

    /// Adds `b[i]` to every entry of row `i` of `x[m×n]`.
    pub fn add_col_vec(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(b)?;
        let (vx, vb) = (self.value(x), self.value(b));
        let (m, n) = vx.dims2("add_col_vec")?;
        if vb.shape() != [m] {
            return Err(TensorError::mismatch("add_col_vec", vx.shape(), vb.shape()));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i / n])
            .collect();
        let v = Tensor::from_parts_unchecked(vx.shape().to_vec(), data).finite("add_col_vec")?;
        Ok(self.push_op(v, Op::AddColVec(x, b), &[x, b]))
    }

    /// Multiplies row `i` of `x[m×n]` by `a[i]`.
    pub fn scale_rows(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(a)?;
        let (vx, va) = (self.value(x), self.value(a));
        let (m, n) = vx.dims2("scale_rows")?;
        if va.shape() != [m] {
            return Err(TensorError::mismatch("scale_rows", vx.shape(), va.shape()));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * va.data()[i / n])
            .collect();
        let v = Tensor::from_parts_unchecked(vx.shape().to_vec(), data).finite("scale_rows")?;
        Ok(self.push_op(v, Op::ScaleRows(x, a), &[x, a]))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(|v| v * c)?;
        Ok(self.push_op(v, Op::Scale(x, c), &[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::relu(self.value(x))?;
        Ok(self.push_op(v, Op::Relu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::sigmoid(self.value(x))?;
        Ok(self.push_op(v, Op::Sigmoid(x), &[x]))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::softplus(self.value(x))?;
        Ok(self.push_op(v, Op::Softplus(x), &[x]))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(|v| v.abs())?;
        Ok(self.push_op(v, Op::Abs(x), &[x]))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::softmax_rows(self.value(x))?;
        Ok(self.push_op(v, Op::SoftmaxRows(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        for id in [x, gain, bias] {
            self.check(id)?;
        }
        let (v, stats) = tensor::layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized: stats.normalized,
            inv_std: stats.inv_std,
        };
        Ok(self.push_op(v, op, &[x, gain, bias]))
    }

    pub fn max_pool2d(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        self.check(x)?;
        let (v, argmax) = tensor::max_pool2d_with_argmax(self.value(x), out_h, out_w)?;
        Ok(self.push_op(v, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean of each row of `x[m×n]`, giving `[m]`. On a `C×(H·W)` view this is
    /// global average pooling.
    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = self.value(x);
        let (m, n) = vx.dims2("row_mean")?;
        let inv = T::one() / T::from_usize(n).unwrap();
        let data = vx
            .data()
            .chunks(n)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::from_parts_unchecked(vec![m], data);
        Ok(self.push_op(v, Op::RowMean(x), &[x]))
    }

    /// Column-wise maximum of `x[m×n]`; ties resolve to the lowest row.
    pub fn col_max(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = self.value(x);
        let (m, n) = vx.dims2("col_max")?;
        let d = vx.data();
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for j in 0..n {
            let mut best = 0;
            for i in 1..m {
                if d[i * n + j] > d[best * n + j] {
                    best = i;
                }
            }
            out.push(d[best * n + j]);
            argmax.push(best);
        }
        let v = Tensor::from_parts_unchecked(vec![n], out);
        Ok(self.push_op(v, Op::ColMax { x, argmax }, &[x]))
    }

    /// Population variance of each column of `x[m×n]` across its rows.
    pub fn col_var(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = self.value(x);
        let (m, n) = vx.dims2("col_var")?;
        let v = Tensor::from_parts_unchecked(vec![n], col_var_values(vx.data(), m, n));
        Ok(self.push_op(v, Op::ColVar(x), &[x]))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum::<T>();
        let v = Tensor::scalar(s).map_err(|_| TensorError::NonFinite { op: "sum" })?;
        Ok(self.push_op(v, Op::Sum(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(v, Op::Reshape(x), &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_axis0(&vals)?;
        Ok(self.push_op(v, Op::Concat0(parts.to_vec()), parts))
    }

    /// Concatenation of matrices along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_cols", "no inputs"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let (m, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = self.value(p).dims2("concat_cols")?;
            if mi != m {
                return Err(TensorError::mismatch(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::from_parts_unchecked(vec![m, total], data);
        Ok(self.push_op(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check(x)?;
        let vx = self.value(x);
        let (m, n) = vx.dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("range {start}..{end} outside {n} columns"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&vx.data()[i * n + start..i * n + end]);
        }
        let v = Tensor::from_parts_unchecked(vec![m, w], data);
        Ok(self.push_op(v, Op::SliceCols { x, start }, &[x]))
    }

    /// Selects entries of a vector.
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let vx = self.value(x);
        if vx.rank() != 1 {
            return Err(TensorError::invalid("gather", "expected a vector"));
        }
        if indices.is_empty() || indices.iter().any(|&i| i >= vx.len()) {
            return Err(TensorError::invalid("gather", "empty or out-of-range indices"));
        }
        let data = indices.iter().map(|&i| vx.data()[i]).collect();
        let v = Tensor::from_parts_unchecked(vec![indices.len()], data);
        let op = Op::Gather {
            x,
            indices: indices.to_vec(),
        };
        Ok(self.push_op(v, op, &[x]))
    }

    /// `out[j, k] = a[j] − b[k]`.
    pub fn pairwise_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 1 || vb.rank() != 1 {
            return Err(TensorError::mismatch("pairwise_diff", va.shape(), vb.shape()));
        }
        let mut data = Vec::with_capacity(va.len() * vb.len());
        for &x in va.data() {
            for &y in vb.data() {
                data.push(x - y);
            }
        }
        let v = Tensor::from_parts_unchecked(vec![va.len(), vb.len()], data).finite("pairwise_diff")?;
        Ok(self.push_op(v, Op::PairwiseDiff(a, b), &[a, b]))
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.index + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::from_parts_unchecked(lv.shape().to_vec(), vec![T::one()]));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.index].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Vec<T>) {
        if self.wants(id) {
            add_into(&mut grads[id.index], self.nodes[id.index].value.shape(), delta);
        }
    }

    fn propagate(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let bt = tensor::transpose(vb).expect("matrix");
                    let da = tensor::matmul(gy, &bt).expect("shapes");
                    self.acc(grads, *a, da.into_data());
                }
                if self.wants(*b) {
                    let at = tensor::transpose(va).expect("matrix");
                    let db = tensor::matmul(&at, gy).expect("shapes");
                    self.acc(grads, *b, db.into_data());
                }
            }
            Op::Transpose(a) => {
                let d = tensor::transpose(gy).expect("matrix");
                self.acc(grads, *a, d.into_data());
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(vb).map(|(&d, &v)| d * v).collect());
                self.acc(grads, *b, g.iter().zip(va).map(|(&d, &v)| d * v).collect());
            }
            Op::AddRowVec(x, b) => {
                self.acc(grads, *x, g.to_vec());
                let n = self.value(*b).len();
                let mut db = vec![T::zero(); n];
                for (i, &d) in g.iter().enumerate() {
                    db[i % n] = db[i % n] + d;
                }
                self.acc(grads, *b, db);
            }
            Op::AddColVec(x, b) => {
                self.acc(grads, *x, g.to_vec());
                let (_, n) = y.dims2("add_col_vec").expect("matrix");
                self.acc(grads, *b, g.chunks(n).map(|r| r.iter().copied().sum()).collect());
            }
            Op::ScaleRows(x, a) => {
                let (_, n) = y.dims2("scale_rows").expect("matrix");
                let (vx, va) = (self.value(*x).data(), self.value(*a).data());
                self.acc(grads, *x, g.iter().enumerate().map(|(i, &d)| d * va[i / n]).collect());
                let da = g
                    .chunks(n)
                    .zip(vx.chunks(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(&d, &v)| d * v).sum())
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, g.iter().map(|&d| d * *c).collect());
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(y.data()).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                self.acc(grads, *x, d);
            }
            Op::Softplus(x) => {
                let vx = self.value(*x).data();
                let d = g.iter().zip(vx).map(|(&d, &v)| d * tensor::sigmoid_scalar(v)).collect();
                self.acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(vx)
                    .map(|(&d, &v)| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let (_, n) = y.dims2("softmax_rows").expect("matrix");
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
                }
                self.acc(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (_, dim) = y.dims2("layer_norm").expect("matrix");
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); dim];
                    for (i, (&d, &xh)) in g.iter().zip(normalized).enumerate() {
                        dg[i % dim] = dg[i % dim] + d * xh;
                    }
                    self.acc(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); dim];
                    for (i, &d) in g.iter().enumerate() {
                        db[i % dim] = db[i % dim] + d;
                    }
                    self.acc(grads, *bias, db);
                }
                if self.wants(*x) {
                    let dn = T::from_usize(dim).unwrap();
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (gr, xr)) in g.chunks(dim).zip(normalized.chunks(dim)).enumerate() {
                        let dxh: Vec<T> = gr.iter().zip(gv).map(|(&d, &w)| d * w).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / dn;
                        dx.extend(dxh.iter().zip(xr).map(|(&a, &xh)| k * (dn * a - s1 - xh * s2)));
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + d;
                }
                self.acc(grads, *x, dx);
            }
            Op::RowMean(x) => {
                let (_, n) = self.value(*x).dims2("row_mean").expect("matrix");
                let inv = T::one() / T::from_usize(n).unwrap();
                let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, n)).collect();
                self.acc(grads, *x, dx);
            }
            Op::ColMax { x, argmax } => {
                let vx = self.value(*x);
                let (_, n) = vx.dims2("col_max").expect("matrix");
                let mut dx = vec![T::zero(); vx.len()];
                for (j, (&row, &d)) in argmax.iter().zip(g).enumerate() {
                    dx[row * n + j] = dx[row * n + j] + d;
                }
                self.acc(grads, *x, dx);
            }
            Op::ColVar(x) => {
                let vx = self.value(*x);
                let (m, n) = vx.dims2("col_var").expect("matrix");
                let mn = T::from_usize(m).unwrap();
                let mut mean = vec![T::zero(); n];
                for (i, &v) in vx.data().iter().enumerate() {
                    mean[i % n] = mean[i % n] + v;
                }
                for v in &mut mean {
                    *v = *v / mn;
                }
                let two = T::lit(2.0);
                let dx = vx
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| g[i % n] * two * (v - mean[i % n]) / mn)
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, g.to_vec());
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = y.dims2("concat_cols").expect("matrix");
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2("concat_cols").expect("matrix");
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g[i * total + col..i * total + col + w]);
                    }
                    self.acc(grads, p, d);
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2("slice_cols").expect("matrix");
                let (_, w) = y.dims2("slice_cols").expect("matrix");
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..w {
                        dx[i * n + start + j] = g[i * w + j];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gather { x, indices } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &d) in indices.iter().zip(g) {
                    dx[i] = dx[i] + d;
                }
                self.acc(grads, *x, dx);
            }
            Op::PairwiseDiff(a, b) => {
                let (p, q) = y.dims2("pairwise_diff").expect("matrix");
                let da = g.chunks(q).map(|r| r.iter().copied().sum()).collect();
                let mut db = vec![T::zero(); q];
                for j in 0..p {
                    for k in 0..q {
                        db[k] = db[k] - g[j * q + k];
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
        }
    }
}

pub(crate) fn col_var_values<T: Scalar>(data: &[T], m: usize, n: usize) -> Vec<T> {
    let mn = T::from_usize(m).unwrap();
    let mut mean = vec![T::zero(); n];
    for (i, &v) in data.iter().enumerate() {
        mean[i % n] = mean[i % n] + v;
    }
    for v in &mut mean {
        *v = *v / mn;
    }
    let mut var = vec![T::zero(); n];
    for (i, &v) in data.iter().enumerate() {
        let d = v - mean[i % n];
        var[i % n] = var[i % n] + d * d;
    }
    for v in &mut var {
        *v = *v / mn;
    }
    var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Checks `d sum(w ⊙ f(x)) / dx` for a single-input op against central differences.
    fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_t(&mut rng, shape);
        let probe = |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> {
            let y = build(g, x)?;
            let shape = g.value(y).shape().to_vec();
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let w = g.constant(Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))?);
            let p = g.mul(y, w)?;
            g.sum(p)
        };
        let f = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let id = g.param(x.clone());
            let l = probe(&mut g, id).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let id = g.param(x0.clone());
        let l = probe(&mut g, id).unwrap();
        let grads = g.backward(l).unwrap();
        check_gradient(&x0, &grads.get_or_zeros(id), f, None)
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![2, 3], 0.7).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_negative_region_has_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![4], -0.3).unwrap());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![2], 1.0).unwrap());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let mut other = Graph::<f64>::new();
        let y = other.param(Tensor::scalar(1.0).unwrap());
        assert!(matches!(g.backward(y), Err(TensorError::DetachedNode(_))));
        assert!(g.relu(y).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(vec![2], 1.0).unwrap());
        let p = g.param(Tensor::full(vec![2], 2.0).unwrap());
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let cases: Vec<(&str, Vec<usize>, Box<dyn Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>>)> = vec![
            ("transpose", vec![3, 4], Box::new(|g, x| g.transpose(x))),
            ("relu", vec![3, 4], Box::new(|g, x| g.relu(x))),
            ("sigmoid", vec![3, 4], Box::new(|g, x| g.sigmoid(x))),
            ("softplus", vec![3, 4], Box::new(|g, x| g.softplus(x))),
            ("abs", vec![3, 4], Box::new(|g, x| g.abs(x))),
            ("softmax", vec![3, 4], Box::new(|g, x| g.softmax_rows(x))),
            ("scale", vec![5], Box::new(|g, x| g.scale(x, -1.5))),
            ("pool", vec![2, 4, 6], Box::new(|g, x| g.max_pool2d(x, 2, 3))),
            ("row_mean", vec![3, 5], Box::new(|g, x| g.row_mean(x))),
            ("col_max", vec![4, 3], Box::new(|g, x| g.col_max(x))),
            ("col_var", vec![4, 3], Box::new(|g, x| g.col_var(x))),
            ("reshape", vec![2, 6], Box::new(|g, x| g.reshape(x, &[3, 4]))),
            ("slice", vec![3, 5], Box::new(|g, x| g.slice_cols(x, 1, 4))),
            ("gather", vec![6], Box::new(|g, x| g.gather(x, &[4, 0, 4, 2]))),
            ("self_matmul", vec![3, 3], Box::new(|g, x| g.matmul(x, x))),
            (
                "layer_norm",
                vec![3, 5],
                Box::new(|g, x| {
                    let gain = g.constant(Tensor::from_fn(vec![5], |i| 0.5 + i as f64 * 0.3)?);
                    let bias = g.constant(Tensor::from_fn(vec![5], |i| i as f64 * 0.1)?);
                    g.layer_norm(x, gain, bias, 1e-5)
                }),
            ),
        ];
        for (seed, (name, shape, f)) in cases.into_iter().enumerate() {
            let r = check_unary(&shape, seed as u64 + 10, f);
            assert!(r.passed(), "{name}: {r:?}");
        }
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a0 = rand_t(&mut rng, &[3, 4]);
        let b0 = rand_t(&mut rng, &[4, 2]);
        let v3 = rand_t(&mut rng, &[3]);
        let v4 = rand_t(&mut rng, &[4]);
        let ones = rand_t(&mut rng, &[3, 4]);

        type Build = Box<dyn Fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>>;
        let cases: Vec<(&str, Tensor<f64>, Tensor<f64>, Build)> = vec![
            ("matmul", a0.clone(), b0.clone(), Box::new(|g, a, b| g.matmul(a, b))),
            ("add", a0.clone(), ones.clone(), Box::new(|g, a, b| g.add(a, b))),
            ("sub", a0.clone(), ones.clone(), Box::new(|g, a, b| g.sub(a, b))),
            ("mul", a0.clone(), ones.clone(), Box::new(|g, a, b| g.mul(a, b))),
            (
                "add_row_vec",
                a0.clone(),
                v4.clone(),
                Box::new(|g, a, b| g.add_row_vec(a, b)),
            ),
            (
                "add_col_vec",
                a0.clone(),
                v3.clone(),
                Box::new(|g, a, b| g.add_col_vec(a, b)),
            ),
            (
                "scale_rows",
                a0.clone(),
                v3.clone(),
                Box::new(|g, a, b| g.scale_rows(a, b)),
            ),
            (
                "pairwise",
                v3.clone(),
                v4.clone(),
                Box::new(|g, a, b| g.pairwise_diff(a, b)),
            ),
            (
                "concat0",
                a0.clone(),
                ones.clone(),
                Box::new(|g, a, b| g.concat0(&[a, b])),
            ),
            (
                "concat_cols",
                a0.clone(),
                b0.clone(),
                Box::new(|g, a, b| {
                    let bt = g.transpose(b)?;
                    let bt = g.slice_cols(bt, 0, 3)?;
                    let bt = g.transpose(bt)?;
                    let bt = g.reshape(bt, &[3, 2])?;
                    g.concat_cols(&[a, bt])
                }),
            ),
        ];
        for (name, a, b, build) in cases {
            let weights = |shape: Vec<usize>| {
                let mut r = ChaCha8Rng::seed_from_u64(5);
                Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0)).unwrap()
            };
            let eval = |a: &Tensor<f64>, b: &Tensor<f64>| {
                let mut g = Graph::new();
                let (ia, ib) = (g.param(a.clone()), g.param(b.clone()));
                let y = build(&mut g, ia, ib).unwrap();
                let w = g.constant(weights(g.value(y).shape().to_vec()));
                let p = g.mul(y, w).unwrap();
                let l = g.sum(p).unwrap();
                (g, ia, ib, l)
            };
            let (g, ia, ib, l) = eval(&a, &b);
            let grads = g.backward(l).unwrap();
            let ra = check_gradient(
                &a,
                &grads.get_or_zeros(ia),
                |x| {
                    let (g, _, _, l) = eval(x, &b);
                    g.value(l).item()
                },
                None,
            );
            let rb = check_gradient(
                &b,
                &grads.get_or_zeros(ib),
                |x| {
                    let (g, _, _, l) = eval(&a, x);
                    g.value(l).item()
                },
                None,
            );
            assert!(ra.passed() && rb.passed(), "{name}: {ra:?} {rb:?}");
        }
    }

    #[test]
    fn pool_backward_routes_to_first_max() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![1, 2, 2], 3.0).unwrap());
        let p = g.max_pool2d(x, 1, 1).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::<f32>::new();
            let a = g.param(Tensor::from_fn(vec![4, 6], |_| rng.random_range(-1.0..1.0)).unwrap());
            let b = g.param(Tensor::from_fn(vec![6, 4], |_| rng.random_range(-1.0..1.0)).unwrap());
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(c).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
