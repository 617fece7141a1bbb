//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs to run backward. Model parameters enter the tape as borrowed
//! [`Op::Param`] leaves so a forward pass never copies the weights; their
//! gradients are scattered into a caller-provided buffer indexed by
//! parameter id.
//!
//! The tape is deliberately fused at the granularity the encoder needs
//! (multi-head attention, layer norm, softmax cross-entropy) instead of
//! decomposing into scalar primitives.

use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value<'a, T> {
    Borrowed(&'a Matrix<T>),
    Owned(Matrix<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Matrix<T> {
        match self {
            Value::Borrowed(m) => m,
            Value::Owned(m) => m,
        }
    }
}

enum Op<T> {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: Vec<bool>, probs: Vec<T> },
    Gather { table: NodeId, ids: Vec<usize> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    StackRows(Vec<NodeId>),
    SpladeAct(NodeId),
    MaxPoolRows { x: NodeId, argmax: Vec<usize> },
    ZeroPrefixCols { x: NodeId, n: usize },
    Sum(NodeId),
    SumSquares(NodeId),
    MeanRows(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
}

/// Reverse-mode tape. `'a` is the lifetime of borrowed parameter storage.
pub struct Graph<'a, T> {
    nodes: Vec<Node<'a, T>>,
}

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        self.nodes[id.0].value.get()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value: Value::Owned(value), op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant or externally supplied value. Gradients are still recorded
    /// for it and can be read back after [`Graph::backward`].
    pub fn input(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, index: usize, value: &'a Matrix<T>) -> NodeId {
        self.nodes.push(Node { value: Value::Borrowed(value), op: Op::Param(index) });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        let r = self.value(row);
        assert_eq!((1, v.cols()), r.shape(), "add_row shape");
        for i in 0..v.rows() {
            for (a, &b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *a += b;
            }
        }
        self.push(v, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: NodeId, alpha: T) -> NodeId {
        let v = self.value(x).map(|a| a * alpha);
        self.push(v, Op::Scale(x, alpha))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let v = self.value(x).map(|x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()));
        self.push(v, Op::Gelu(x))
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x n`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, n) = xv.shape();
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        assert_eq!(g.len(), n);
        let nf = T::of(n as f64);
        let mut out = Matrix::zeros(rows, n);
        let mut xhat = vec![T::zero(); rows * n];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std[r] = is;
            let o = out.row_mut(r);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                o[j] = g[j] * h + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention. `mask[j] == false` removes
    /// key `j` from every query's softmax. A query with no visible key
    /// produces a zero row.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: &[bool]) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (len, hidden) = qv.shape();
        assert_eq!(mask.len(), len, "attention mask length");
        assert_eq!(hidden % heads, 0);
        let d = hidden / heads;
        let scale = T::one() / T::of(d as f64).sqrt();
        let mut probs = vec![T::zero(); heads * len * len];
        let mut out = Matrix::zeros(len, hidden);
        let mut scores = vec![T::zero(); len];
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            for i in 0..len {
                let qi = &qv.row(i)[cols.clone()];
                let mut max = T::neg_infinity();
                for j in 0..len {
                    if mask[j] {
                        let s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut z = T::zero();
                let p = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                for j in 0..len {
                    if mask[j] {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        z += e;
                    }
                }
                let o = &mut out.row_mut(i)[cols.clone()];
                for j in 0..len {
                    if mask[j] {
                        p[j] /= z;
                        axpy(p[j], &vv.row(j)[cols.clone()], o);
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, mask: mask.to_vec(), probs })
    }

    /// Rows of `table` at `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let id = self.gather(x, rows);
        let node = self.nodes.last_mut().expect("just pushed");
        node.op = Op::SelectRows { x, rows: rows.to_vec() };
        id
    }

    /// Vertical concatenation.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "stack_rows width");
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()))
    }

    /// Elementwise `log(1 + relu(x))`.
    pub fn splade_act(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a > T::zero() { a.ln_1p() } else { T::zero() });
        self.push(v, Op::SpladeAct(x))
    }

    /// Column-wise maximum over the rows whose mask is set, as a `1 x n` row.
    /// Ties resolve to the earliest row.
    pub fn max_pool_rows(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.rows());
        let first = mask.iter().position(|&m| m).expect("max_pool_rows needs a visible row");
        let n = xv.cols();
        let mut out = xv.row(first).to_vec();
        let mut argmax = vec![first; n];
        for r in first + 1..xv.rows() {
            if !mask[r] {
                continue;
            }
            for (j, &v) in xv.row(r).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = r;
                }
            }
        }
        self.push(Matrix::row_vector(out), Op::MaxPoolRows { x, argmax })
    }

    /// Zeroes the first `n` columns.
    pub fn zero_prefix_cols(&mut self, x: NodeId, n: usize) -> NodeId {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = n.min(row.len());
            row[..m].iter_mut().for_each(|a| *a = T::zero());
        }
        self.push(v, Op::ZeroPrefixCols { x, n })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).as_slice().iter().copied().sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).as_slice().iter().map(|&a| a * a).sum();
        self.push(Matrix::scalar(s), Op::SumSquares(x))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let inv = T::one() / T::of(xv.rows() as f64);
        let mut out = vec![T::zero(); xv.cols()];
        for r in 0..xv.rows() {
            axpy(inv, xv.row(r), &mut out);
        }
        self.push(Matrix::row_vector(out), Op::MeanRows(x))
    }

    /// Sum over rows of softmax cross-entropy against `targets[row]`.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross entropy targets");
        let n = lv.cols();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * n..(r + 1) * n];
            let mut z = T::zero();
            for j in 0..n {
                p[j] = (row[j] - max).exp();
                z += p[j];
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            total += z.ln() + max - row[t];
        }
        self.push(Matrix::scalar(total), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Runs the reverse pass from the given seed gradients.
    pub fn backward(&self, seeds: &[(NodeId, Matrix<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.value(*id).shape(), "seed gradient shape");
            accumulate(&mut grads, *id, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Backward from a scalar node with unit seed.
    pub fn backward_scalar(&self, loss: NodeId) -> Grads<T> {
        self.backward(&[(loss, Matrix::scalar(T::one()))])
    }

    /// Adds the gradients of every parameter leaf into `out[param_index]`.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, out: &mut [Matrix<T>]) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &grads.grads[idx]) {
                out[*p].add_assign(g);
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul_bt(bv));
                accumulate(grads, *b, av.matmul_at(g));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul(bv));
                accumulate(grads, *b, g.matmul_at(av));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g.clone());
                let mut gr = vec![T::zero(); g.cols()];
                for r in 0..g.rows() {
                    axpy(T::one(), g.row(r), &mut gr);
                }
                accumulate(grads, *row, Matrix::row_vector(gr));
            }
            Op::Scale(x, alpha) => {
                let alpha = *alpha;
                accumulate(grads, *x, g.map(|a| a * alpha));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                let data = xv
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&x, &gy)| {
                        let t = (c * (x + a * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * x * x);
                        gy * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                accumulate(grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, n) = g.shape();
                let gv = self.value(*gain).as_slice();
                let nf = T::of(n as f64);
                let mut dx = Matrix::zeros(rows, n);
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for r in 0..rows {
                    let gy = g.row(r);
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        dgain[j] += gy[j] * xh[j];
                        dbias[j] += gy[j];
                        dxhat[j] = gy[j] * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xh[j];
                    }
                    let k = inv_std[r] / nf;
                    let o = dx.row_mut(r);
                    for j in 0..n {
                        o[j] = k * (nf * dxhat[j] - s1 - xh[j] * s2);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, Matrix::row_vector(dgain));
                accumulate(grads, *bias, Matrix::row_vector(dbias));
            }
            Op::Attention { q, k, v, heads, mask, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (len, hidden) = qv.shape();
                let d = hidden / heads;
                let scale = T::one() / T::of(d as f64).sqrt();
                let mut dq = Matrix::zeros(len, hidden);
                let mut dk = Matrix::zeros(len, hidden);
                let mut dv = Matrix::zeros(len, hidden);
                let mut ds = vec![T::zero(); len];
                for h in 0..*heads {
                    let cols = h * d..(h + 1) * d;
                    for i in 0..len {
                        let p = &probs[(h * len + i) * len..(h * len + i + 1) * len];
                        let gi = &g.row(i)[cols.clone()];
                        let mut inner = T::zero();
                        for j in 0..len {
                            if mask[j] && p[j] != T::zero() {
                                axpy(p[j], gi, &mut dv.row_mut(j)[cols.clone()]);
                                let dp = dot(gi, &vv.row(j)[cols.clone()]);
                                ds[j] = dp;
                                inner += p[j] * dp;
                            } else {
                                ds[j] = T::zero();
                            }
                        }
                        for j in 0..len {
                            if mask[j] && p[j] != T::zero() {
                                let s = p[j] * (ds[j] - inner) * scale;
                                axpy(s, &kv.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                                axpy(s, &qv.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                            }
                        }
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::Gather { table, ids } | Op::SelectRows { x: table, rows: ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    axpy(T::one(), g.row(r), dt.row_mut(id));
                }
                accumulate(grads, *table, dt);
            }
            Op::StackRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let data = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(grads, p, Matrix::from_vec(rows, cols, data));
                    offset += rows;
                }
            }
            Op::SpladeAct(x) => {
                let xv = self.value(*x);
                let data = xv
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&a, &gy)| if a > T::zero() { gy / (T::one() + a) } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::MaxPoolRows { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (j, &r) in argmax.iter().enumerate() {
                    dx.set(r, j, g.as_slice()[j]);
                }
                accumulate(grads, *x, dx);
            }
            Op::ZeroPrefixCols { x, n } => {
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    let row = dx.row_mut(r);
                    let m = (*n).min(row.len());
                    row[..m].iter_mut().for_each(|a| *a = T::zero());
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.item()));
            }
            Op::SumSquares(x) => {
                let two_g = T::of(2.0) * g.item();
                accumulate(grads, *x, self.value(*x).map(|a| two_g * a));
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.value(*x).shape();
                let inv = T::one() / T::of(rows as f64);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    axpy(inv, g.as_slice(), dx.row_mut(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (rows, cols) = self.value(*logits).shape();
                let gs = g.item();
                let mut dl = Matrix::from_vec(rows, cols, probs.iter().map(|&p| p * gs).collect());
                for (r, &t) in targets.iter().enumerate() {
                    let cur = dl.get(r, t);
                    dl.set(r, t, cur - gs);
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros shaped like its value when nothing flowed.
    pub fn get_or_zeros(&self, graph: &Graph<'_, T>, id: NodeId) -> Matrix<T> {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = graph.value(id).shape();
            Matrix::zeros(r, c)
        })
    }
}
