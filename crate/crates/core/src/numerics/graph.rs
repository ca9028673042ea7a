//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every primitive it evaluates. Values are computed
//! eagerly; [`Graph::backward`] walks the record in exact reverse order and
//! accumulates adjoints. Besides the dense primitives (matmul, elementwise
//! activations, row softmax) the tape has a handful of batched kernels that
//! the agent network and the mixer need to stay vectorised over ragged
//! inputs: segment attention over variable-length entity sets, per-graph
//! block propagation, row-wise vector-matrix products and gathers.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of rows `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Relu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    RowSum(Var),
    Pick(Var, Arc<[usize]>),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Arc<[Segment]>,
        probs: Vec<f64>,
    },
    SegmentMean(Var, Arc<[Segment]>),
    GatherRows(Var, Arc<[Option<usize>]>),
    GroupDot(Var, Var),
    BatchedVecMat(Var, Var),
    BlockPropagate(Var, Arc<[f64]>, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The tape. One graph per forward pass; discard it after `backward`.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)`
/// of shape `k x n`. `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose presence is asserted by the caller's shape checks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Records a constant input. Gradients still flow to it but are never
    /// reported by name.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a named parameter. Registering the same name twice returns the
    /// original handle so that gradients from every use accumulate.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Looks `name` up in `store` and records it as a parameter.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        Ok(self.param(name, t))
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(bias).len() != c {
            return Err(Error::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for (x, y) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *x += y;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    /// `a @ w + b`, the fully connected layer.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(a, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        let t = self.map(a, elu);
        self.push(t, Op::Elu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        self.push(t, Op::Abs(a))
    }

    /// Softmax along each row, with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::NumericDomain {
                op: "softmax_rows",
                detail: "input contains non-finite entries".into(),
            });
        }
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        if c > 0 {
            out.chunks_mut(c).for_each(softmax_in_place);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::SoftmaxRows(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            width += c;
        }
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                if t.cols() > 0 {
                    out.extend_from_slice(t.row(i));
                }
            }
        }
        let t = Tensor::matrix(rows, width, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        Ok(self.push(t, Op::SliceRows(a, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row into an `r x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let ta = self.value(a);
        let out = (0..r)
            .map(|i| ta.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let t = Tensor::matrix(r, 1, out)?;
        Ok(self.push(t, Op::RowSum(a)))
    }

    /// Selects column `idx[i]` from row `i`, giving an `r x 1` column.
    pub fn pick(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r {
            return Err(Error::dim("pick", self.shape(a), &[idx.len()]));
        }
        let ta = self.value(a);
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::Contract(format!(
                    "pick: column {j} out of range for width {c}"
                )));
            }
            out.push(ta.data()[i * c + j]);
        }
        let t = Tensor::matrix(r, 1, out)?;
        Ok(self.push(t, Op::Pick(a, idx)))
    }

    /// Scaled dot-product attention of each query row over its own segment
    /// of key/value rows. An empty segment yields a zero output row.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Arc<[Segment]>,
    ) -> Result<Var> {
        let (n, d) = self.dims(q);
        let (m, dk) = self.dims(k);
        let (mv, dv) = self.dims(v);
        if dk != d || mv != m {
            return Err(Error::dim(
                "segment_attention",
                self.shape(q),
                self.shape(k),
            ));
        }
        if segments.len() != n {
            return Err(Error::dim("segment_attention", &[n], &[segments.len()]));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; m];
        let mut out = vec![0.0; n * dv];
        for (i, seg) in segments.iter().enumerate() {
            if seg.len == 0 {
                continue;
            }
            if seg.start + seg.len > m {
                return Err(Error::Contract(format!(
                    "segment {i} ({}..{}) exceeds {m} key rows",
                    seg.start,
                    seg.start + seg.len
                )));
            }
            let qi = tq.row(i);
            let p = &mut probs[seg.start..seg.start + seg.len];
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = tk.row(seg.start + j);
                *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(p);
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (j, pj) in p.iter().enumerate() {
                for (o, x) in oi.iter_mut().zip(tv.row(seg.start + j)) {
                    *o += pj * x;
                }
            }
        }
        let t = Tensor::matrix(n, dv, out)?;
        Ok(self.push(
            t,
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                probs,
            },
        ))
    }

    /// Mean of each segment of rows of `v`; empty segments give zeros.
    pub fn segment_mean(&mut self, v: Var, segments: Arc<[Segment]>) -> Result<Var> {
        let (m, d) = self.dims(v);
        let tv = self.value(v);
        let mut out = vec![0.0; segments.len() * d];
        for (i, seg) in segments.iter().enumerate() {
            if seg.start + seg.len > m {
                return Err(Error::Contract(format!("segment {i} exceeds {m} rows")));
            }
            if seg.len == 0 {
                continue;
            }
            let inv = 1.0 / seg.len as f64;
            let oi = &mut out[i * d..(i + 1) * d];
            for j in seg.start..seg.start + seg.len {
                for (o, x) in oi.iter_mut().zip(tv.row(j)) {
                    *o += x * inv;
                }
            }
        }
        let t = Tensor::matrix(segments.len(), d, out)?;
        Ok(self.push(t, Op::SegmentMean(v, segments)))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[Option<usize>]>) -> Result<Var> {
        let (m, d) = self.dims(a);
        let ta = self.value(a);
        let mut out = vec![0.0; idx.len() * d];
        for (i, j) in idx.iter().enumerate() {
            if let Some(j) = *j {
                if j >= m {
                    return Err(Error::Contract(format!("gather_rows: row {j} of {m}")));
                }
                out[i * d..(i + 1) * d].copy_from_slice(ta.row(j));
            }
        }
        let t = Tensor::matrix(idx.len(), d, out)?;
        Ok(self.push(t, Op::GatherRows(a, idx)))
    }

    /// `out[i, s] = u[i] . g[i * S + s]` for `u: N x d`, `g: (N*S) x d`.
    pub fn group_dot(&mut self, u: Var, g: Var) -> Result<Var> {
        let (n, d) = self.dims(u);
        let (ng, dg) = self.dims(g);
        if dg != d || (n == 0 && ng != 0) || (n > 0 && ng % n != 0) {
            return Err(Error::dim("group_dot", self.shape(u), self.shape(g)));
        }
        let s = ng.checked_div(n).unwrap_or(0);
        let (tu, tg) = (self.value(u), self.value(g));
        let mut out = vec![0.0; n * s];
        for i in 0..n {
            let ui = tu.row(i);
            for k in 0..s {
                out[i * s + k] = ui.iter().zip(tg.row(i * s + k)).map(|(a, b)| a * b).sum();
            }
        }
        let t = Tensor::matrix(n, s, out)?;
        Ok(self.push(t, Op::GroupDot(u, g)))
    }

    /// Row-wise vector-matrix product: row `p` of `w` holds an `n x d`
    /// matrix in row-major order, and `out[p] = x[p] @ W_p`.
    pub fn batched_vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let (p, n) = self.dims(x);
        let (pw, nd) = self.dims(w);
        if pw != p || n == 0 || nd % n != 0 {
            return Err(Error::dim("batched_vecmat", self.shape(x), self.shape(w)));
        }
        let d = nd / n;
        let (tx, tw) = (self.value(x), self.value(w));
        let mut out = vec![0.0; p * d];
        for r in 0..p {
            let xr = tx.row(r);
            let wr = tw.row(r);
            let or = &mut out[r * d..(r + 1) * d];
            for (i, xi) in xr.iter().enumerate() {
                for (o, wij) in or.iter_mut().zip(&wr[i * d..(i + 1) * d]) {
                    *o += xi * wij;
                }
            }
        }
        let t = Tensor::matrix(p, d, out)?;
        Ok(self.push(t, Op::BatchedVecMat(x, w)))
    }

    /// Multiplies each consecutive `n`-row block of `h` by its own constant
    /// `n x n` matrix taken from `blocks` (row-major, one after another).
    pub fn block_propagate(&mut self, blocks: Arc<[f64]>, n: usize, h: Var) -> Result<Var> {
        let (r, d) = self.dims(h);
        if n == 0 || r % n != 0 || blocks.len() != (r / n) * n * n {
            return Err(Error::dim(
                "block_propagate",
                &[blocks.len(), n],
                self.shape(h),
            ));
        }
        let th = self.value(h);
        let mut out = vec![0.0; r * d];
        for b in 0..r / n {
            gemm(
                n,
                n,
                d,
                &blocks[b * n * n..(b + 1) * n * n],
                false,
                &th.data()[b * n * d..(b + 1) * n * d],
                false,
                &mut out[b * n * d..(b + 1) * n * d],
                0.0,
            );
        }
        let t = Tensor::matrix(r, d, out)?;
        Ok(self.push(t, Op::BlockPropagate(h, blocks, n)))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC B^T ; dB = A^T dC
                with_grad(grads, *a, m * k, |da| {
                    gemm(m, n, k, g, false, vb, true, da, 1.0)
                });
                with_grad(grads, *b, k * n, |db| {
                    gemm(k, m, n, va, true, g, false, db, 1.0)
                });
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                with_grad(grads, *b, g.len(), |db| {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                with_grad(grads, *a, g.len(), |da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                with_grad(grads, *b, g.len(), |db| {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, *a, g);
                let c = self.value(*bias).len();
                with_grad(grads, *bias, c, |db| {
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::Scale(a, c) => with_grad(grads, *a, g.len(), |da| {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)
            }),
            Op::Sigmoid(a) => elementwise(grads, *a, g, y, |_, y| y * (1.0 - y), self),
            Op::Tanh(a) => elementwise(grads, *a, g, y, |_, y| 1.0 - y * y, self),
            Op::Elu(a) => elementwise(
                grads,
                *a,
                g,
                y,
                |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
                self,
            ),
            Op::Relu(a) => elementwise(
                grads,
                *a,
                g,
                y,
                |x, _| if x > 0.0 { 1.0 } else { 0.0 },
                self,
            ),
            Op::Abs(a) => elementwise(
                grads,
                *a,
                g,
                y,
                |x, _| x.signum() * (x != 0.0) as u8 as f64,
                self,
            ),
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                with_grad(grads, *a, g.len(), |da| {
                    if c == 0 {
                        return;
                    }
                    for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let width = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.dims(*p).1;
                    with_grad(grads, *p, rows * c, |dp| {
                        for r in 0..rows {
                            let src = &g[r * width + offset..r * width + offset + c];
                            dp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    accumulate(grads, *p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.dims(*a).1;
                let total = self.value(*a).len();
                with_grad(grads, *a, total, |da| {
                    da[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x)
                });
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                with_grad(grads, *a, n, |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::RowSum(a) => {
                let (r, c) = self.dims(*a);
                with_grad(grads, *a, r * c, |da| {
                    for i in 0..r {
                        da[i * c..(i + 1) * c].iter_mut().for_each(|d| *d += g[i]);
                    }
                });
            }
            Op::Pick(a, idx) => {
                let (r, c) = self.dims(*a);
                with_grad(grads, *a, r * c, |da| {
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * c + j] += g[i];
                    }
                });
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, probs, g, grads),
            Op::SegmentMean(v, segments) => {
                let (m, d) = self.dims(*v);
                with_grad(grads, *v, m * d, |dv| {
                    for (i, seg) in segments.iter().enumerate() {
                        if seg.len == 0 {
                            continue;
                        }
                        let inv = 1.0 / seg.len as f64;
                        let gi = &g[i * d..(i + 1) * d];
                        for j in seg.start..seg.start + seg.len {
                            dv[j * d..(j + 1) * d]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(o, x)| *o += x * inv);
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let (m, d) = self.dims(*a);
                with_grad(grads, *a, m * d, |da| {
                    for (i, j) in idx.iter().enumerate() {
                        if let Some(j) = *j {
                            da[j * d..(j + 1) * d]
                                .iter_mut()
                                .zip(&g[i * d..(i + 1) * d])
                                .for_each(|(o, x)| *o += x);
                        }
                    }
                });
            }
            Op::GroupDot(u, gm) => {
                let (n, d) = self.dims(*u);
                let s = node.value.cols();
                let (tu, tg) = (self.value(*u), self.value(*gm));
                with_grad(grads, *u, n * d, |du| {
                    for i in 0..n {
                        for k in 0..s {
                            let w = g[i * s + k];
                            du[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(tg.row(i * s + k))
                                .for_each(|(o, x)| *o += w * x);
                        }
                    }
                });
                with_grad(grads, *gm, n * s * d, |dg| {
                    for i in 0..n {
                        for k in 0..s {
                            let w = g[i * s + k];
                            let r = i * s + k;
                            dg[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(tu.row(i))
                                .for_each(|(o, x)| *o += w * x);
                        }
                    }
                });
            }
            Op::BatchedVecMat(x, w) => {
                let (p, n) = self.dims(*x);
                let d = node.value.cols();
                let (tx, tw) = (self.value(*x), self.value(*w));
                with_grad(grads, *x, p * n, |dx| {
                    for r in 0..p {
                        let gr = &g[r * d..(r + 1) * d];
                        let wr = tw.row(r);
                        for i in 0..n {
                            dx[r * n + i] += wr[i * d..(i + 1) * d]
                                .iter()
                                .zip(gr)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                });
                with_grad(grads, *w, p * n * d, |dw| {
                    for r in 0..p {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = tx.row(r);
                        for (i, &xi) in xr.iter().enumerate().take(n) {
                            let base = r * n * d + i * d;
                            dw[base..base + d]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(o, x)| *o += xi * x);
                        }
                    }
                });
            }
            Op::BlockPropagate(h, blocks, n) => {
                let n = *n;
                let (r, d) = self.dims(*h);
                with_grad(grads, *h, r * d, |dh| {
                    for b in 0..r / n {
                        gemm(
                            n,
                            n,
                            d,
                            &blocks[b * n * n..(b + 1) * n * n],
                            true,
                            &g[b * n * d..(b + 1) * n * d],
                            false,
                            &mut dh[b * n * d..(b + 1) * n * d],
                            1.0,
                        );
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, d) = self.dims(q);
        let (m, dv) = self.dims(v);
        let scale = 1.0 / (d as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dvv = vec![0.0; m * dv];
        let mut dlogit = Vec::new();
        for (i, seg) in segments.iter().enumerate() {
            if seg.len == 0 {
                continue;
            }
            let gi = &g[i * dv..(i + 1) * dv];
            let p = &probs[seg.start..seg.start + seg.len];
            dlogit.clear();
            for (j, pj) in p.iter().enumerate() {
                let row = seg.start + j;
                dvv[row * dv..(row + 1) * dv]
                    .iter_mut()
                    .zip(gi)
                    .for_each(|(o, x)| *o += pj * x);
                dlogit.push(gi.iter().zip(tv.row(row)).map(|(a, b)| a * b).sum::<f64>());
            }
            let mean: f64 = p.iter().zip(&dlogit).map(|(a, b)| a * b).sum();
            let qi = tq.row(i);
            for (j, pj) in p.iter().enumerate() {
                let row = seg.start + j;
                let w = pj * (dlogit[j] - mean) * scale;
                dq[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(tk.row(row))
                    .for_each(|(o, x)| *o += w * x);
                dk[row * d..(row + 1) * d]
                    .iter_mut()
                    .zip(qi)
                    .for_each(|(o, x)| *o += w * x);
            }
        }
        accumulate(grads, q, &dq);
        accumulate(grads, k, &dk);
        accumulate(grads, v, &dvv);
    }
}

fn with_grad(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(d, x)| *d += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn elementwise(
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    g: &[f64],
    y: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    graph: &Graph,
) {
    let x = graph.value(a).data();
    with_grad(grads, a, g.len(), |da| {
        for (((d, gi), xi), yi) in da.iter_mut().zip(g).zip(x).zip(y) {
            *d += gi * deriv(*xi, *yi);
        }
    });
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is not on the loss path.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every named parameter registered on `graph`.
    pub fn by_name(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .param_names()
            .map(|(name, v)| (name.to_string(), self.wrt(graph, v)))
            .collect()
    }
}
