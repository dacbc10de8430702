//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node; nodes are therefore already in
//! topological order and `backward` is a single reverse sweep. Parameters
//! are bound by name so their gradients can be routed back into a
//! [`ParamStore`].

use std::collections::HashMap;

use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Tanh,
}

/// Normalization source for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize by the statistics of the batch itself.
    Batch,
    /// Normalize by fixed per-feature mean and variance.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-feature statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Pointwise(Var, Pointwise),
    Square(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GraphMix(Var, Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MeanAbsDiff(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `c (+)= a · b` where `a` is logically `m×k` and `b` is `k×n`. The
/// transpose flags describe how the operands are stored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted buffer lengths cover every index reachable from
    // the given dimensions and strides.
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

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

/// Block sizes up to this use direct loops in `graph_mix`; above it, GEMM.
const SMALL_GRAPH: usize = 32;

/// `out_b (+)= A · x_b` (or `Aᵀ · x_b`) for every block `b` of `n` rows.
fn mix_blocks(adj: &[f64], n: usize, transposed: bool, x: &[f64], c: usize, out: &mut [f64]) {
    let block = n * c;
    if n > SMALL_GRAPH {
        for (src, dst) in x.chunks(block).zip(out.chunks_mut(block)) {
            gemm(n, n, c, adj, transposed, src, false, dst, true);
        }
        return;
    }
    for (src, dst) in x.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..n {
            let row = &mut dst[i * c..(i + 1) * c];
            for j in 0..n {
                let a = if transposed { adj[j * n + i] } else { adj[i * n + j] };
                if a != 0.0 {
                    row.iter_mut()
                        .zip(&src[j * c..(j + 1) * c])
                        .for_each(|(o, v)| *o += a * v);
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A tracked leaf that is not bound to a named parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// original node so shared weights accumulate a single gradient.
    pub fn bind(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let mut copy = Tensor::new(value.shape(), value.data().to_vec()).expect("parameter tensor is well formed");
        copy.clear_grad();
        let v = self.push(copy, Op::Leaf, true);
        self.bound.insert(name.to_string(), v);
        self.order.push((name.to_string(), v));
        v
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.order
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        let src = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a per-column bias of length `p` to every row of an `m×p` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, p) = ta.dims2()?;
        if tb.numel() != p {
            return Err(mismatch("add_row_bias", ta, tb));
        }
        let b = tb.data();
        let mut out = ta.data().to_vec();
        if p > 0 {
            for row in out.chunks_mut(p) {
                row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        let value = Tensor::new(ta.shape(), out)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddRowBias(a, bias), ng))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| scale * x + shift).collect();
        let value = Tensor::new(ta.shape(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    pub fn pointwise(&mut self, kind: Pointwise, a: Var) -> Var {
        let ta = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Pointwise::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Pointwise::Sigmoid => sigmoid,
            Pointwise::Tanh => f64::tanh,
        };
        let out = ta.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(ta.shape(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(value, Op::Pointwise(a, kind), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.pointwise(Pointwise::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.pointwise(Pointwise::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.pointwise(Pointwise::Tanh, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * x).collect();
        let value = Tensor::new(ta.shape(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, k) = ta.dims2()?;
        let mut out = ta.data().to_vec();
        if k > 0 {
            for row in out.chunks_mut(k) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        let value = Tensor::new(ta.shape(), out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    /// Feature concatenation `[a ∥ b]` of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p) = ta.dims2()?;
        let (m2, q) = tb.dims2()?;
        if m != m2 {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let value = Tensor::new(&[m, p + q], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows needs at least one input".into()))?;
        let (_, k) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = self.value(*p);
            let (m, k2) = t.dims2()?;
            if k2 != k {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += m;
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows, k], out)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, k) = ta.dims2()?;
        if start + len > m {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape: ta.shape().to_vec(),
                reason: format!("rows {start}..{} out of range", start + len),
            });
        }
        let value = Tensor::new(&[len, k], ta.data()[start * k..(start + len) * k].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    /// Applies an `n×n` adjacency to every block of `n` consecutive rows:
    /// `out[b·n + i] = Σ_j adj[i, j] · x[b·n + j]`.
    pub fn graph_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (tadj, tx) = (self.value(adj), self.value(x));
        let (n, n2) = tadj.dims2()?;
        let (rows, c) = tx.dims2()?;
        if n != n2 || n == 0 || rows % n != 0 {
            return Err(mismatch("graph_mix", tadj, tx));
        }
        let mut out = vec![0.0; rows * c];
        mix_blocks(tadj.data(), n, false, tx.data(), c, &mut out);
        let value = Tensor::new(&[rows, c], out)?;
        let ng = self.ng(adj) || self.ng(x);
        Ok(self.push(value, Op::GraphMix(adj, x), ng))
    }

    /// Batch normalization over the rows of an `m×h` matrix, treating
    /// columns as channels. Returns the output and, when normalizing by
    /// batch statistics, the observed moments.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let tx = self.value(x);
        let (m, h) = tx.dims2()?;
        if m == 0 {
            return Err(TensorError::EmptyBatch);
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != h || tb.numel() != h {
            return Err(mismatch("batch_norm", tx, tg));
        }
        let data = tx.data();
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; h];
                for row in data.chunks(h) {
                    mean.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                mean.iter_mut().for_each(|s| *s /= m as f64);
                let mut var = vec![0.0; h];
                for row in data.chunks(h) {
                    for j in 0..h {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= m as f64);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(moments))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != h || var.len() != h {
                    return Err(TensorError::InvalidShape {
                        op: "batch_norm",
                        shape: vec![mean.len(), var.len()],
                        reason: format!("running statistics must have {h} entries"),
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = vec![0.0; m * h];
        let mut out = vec![0.0; m * h];
        let (g, b) = (tg.data(), tb.data());
        for (i, row) in data.chunks(h).enumerate() {
            for j in 0..h {
                let xh = (row[j] - mean[j]) * inv_std[j];
                normalized[i * h + j] = xh;
                out[i * h + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(&[m, h], out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: moments.is_some(),
            },
            ng,
        );
        Ok((var_out, moments))
    }

    /// `mean(|a − b|)` as a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mean_abs_diff", ta, tb));
        }
        if ta.numel() == 0 {
            return Err(TensorError::Contract("mean_abs_diff of empty tensors".into()));
        }
        let total: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(total / ta.numel() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MeanAbsDiff(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(total), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let total: f64 = t.data().iter().sum();
        let value = Tensor::scalar(total / t.numel().max(1) as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(shape, t.data().to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and accumulates every bound parameter's gradient into
    /// the matching entry of `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (name, var) in &self.order {
            if let Some(g) = grads.get(*var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let (_, n) = tb.dims2().unwrap();
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, &mut da, false);
                    add_owned(&mut grads[a.0], da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g, false, &mut db, false);
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                add_owned(&mut grads[a.0], da);
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRowBias(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    let p = self.value(*b).numel();
                    let mut db = vec![0.0; p];
                    for row in g.chunks(p) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_owned(&mut grads[b.0], neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    add_owned(&mut grads[a.0], da);
                }
                if self.ng(*b) {
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if self.ng(*a) {
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(g, y)| g / y).collect();
                    add_owned(&mut grads[a.0], da);
                }
                if self.ng(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .zip(tb.data())
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Affine(a, scale) => {
                let da: Vec<f64> = g.iter().map(|v| v * scale).collect();
                add_owned(&mut grads[a.0], da);
            }
            Op::Pointwise(a, kind) => {
                let da: Vec<f64> = match kind {
                    Pointwise::Relu => g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Pointwise::Sigmoid => g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect(),
                    Pointwise::Tanh => g.iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t)).collect(),
                };
                add_owned(&mut grads[a.0], da);
            }
            Op::Square(a) => {
                let da: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                add_owned(&mut grads[a.0], da);
            }
            Op::SoftmaxRows(a) => {
                let (_, k) = out.dims2().unwrap();
                let mut da = vec![0.0; out.numel()];
                for ((s, gr), d) in out.data().chunks(k).zip(g.chunks(k)).zip(da.chunks_mut(k)) {
                    let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for j in 0..k {
                        d[j] = s[j] * (gr[j] - dot);
                    }
                }
                add_owned(&mut grads[a.0], da);
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = self.value(*a).dims2().unwrap();
                let (_, q) = self.value(*b).dims2().unwrap();
                let w = p + q;
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(m * p);
                    for row in g.chunks(w) {
                        da.extend_from_slice(&row[..p]);
                    }
                    add_owned(&mut grads[a.0], da);
                }
                if self.ng(*b) {
                    let mut db = Vec::with_capacity(m * q);
                    for row in g.chunks(w) {
                        db.extend_from_slice(&row[p..]);
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.ng(*p) {
                        add_into(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let (_, k) = src.dims2().unwrap();
                let slot = grads[a.0].get_or_insert_with(|| vec![0.0; src.numel()]);
                let begin = start * k;
                slot[begin..begin + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            }
            Op::GraphMix(adj, x) => {
                let (tadj, tx) = (self.value(*adj), self.value(*x));
                let (n, _) = tadj.dims2().unwrap();
                let (rows, c) = tx.dims2().unwrap();
                let block = n * c;
                if self.ng(*x) {
                    let mut dx = vec![0.0; rows * c];
                    mix_blocks(tadj.data(), n, true, g, c, &mut dx);
                    add_owned(&mut grads[x.0], dx);
                }
                if self.ng(*adj) {
                    let mut dadj = vec![0.0; n * n];
                    for (gb, xb) in g.chunks(block).zip(tx.data().chunks(block)) {
                        gemm(n, c, n, gb, false, xb, true, &mut dadj, true);
                    }
                    add_owned(&mut grads[adj.0], dadj);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (m, h) = out.dims2().unwrap();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; h];
                let mut dbeta = vec![0.0; h];
                for (row_g, row_n) in g.chunks(h).zip(normalized.chunks(h)) {
                    for j in 0..h {
                        dgamma[j] += row_g[j] * row_n[j];
                        dbeta[j] += row_g[j];
                    }
                }
                if self.ng(*input) {
                    let mut dx = vec![0.0; m * h];
                    if *batch_stats {
                        let mf = m as f64;
                        for (i, (row_g, row_n)) in g.chunks(h).zip(normalized.chunks(h)).enumerate() {
                            for j in 0..h {
                                let dxh = row_g[j] * gam[j];
                                // Σ dx̂ = γ·dβ and Σ dx̂·x̂ = γ·dγ
                                dx[i * h + j] =
                                    inv_std[j] / mf * (mf * dxh - gam[j] * dbeta[j] - row_n[j] * gam[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for (i, row_g) in g.chunks(h).enumerate() {
                            for j in 0..h {
                                dx[i * h + j] = row_g[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    add_owned(&mut grads[input.0], dx);
                }
                if self.ng(*gamma) {
                    add_owned(&mut grads[gamma.0], dgamma);
                }
                if self.ng(*beta) {
                    add_owned(&mut grads[beta.0], dbeta);
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = g[0] / ta.numel() as f64;
                let sign: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.ng(*b) {
                    let neg: Vec<f64> = sign.iter().map(|v| -v).collect();
                    add_owned(&mut grads[b.0], neg);
                }
                if self.ng(*a) {
                    add_owned(&mut grads[a.0], sign);
                }
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).numel()];
                add_owned(&mut grads[a.0], da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let da = vec![g[0] / n as f64; n];
                add_owned(&mut grads[a.0], da);
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g),
        }
    }
}
