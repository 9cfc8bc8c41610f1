//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive pushes one node holding its output value plus whatever it
//! needs for the backward pass. `backward` walks the nodes in exact reverse
//! order, so an op's inputs always precede it. Nodes that do not depend on a
//! trainable leaf are never visited, which keeps unselected branches (for
//! example the private FFNs of other dialects) at an exact-zero gradient.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{softmax_in_place, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, rstd: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Im2Col { x: Var, kernel: usize },
    Transpose(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter. `None` means the parameter never reached the
    /// loss, i.e. its gradient is exactly zero.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// Dense per-parameter gradients indexed by `ParamId`, zero-filled for
    /// parameters that were not touched.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out[id.index()] = g.clone();
            }
        }
        out
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    t.as_matrix(op)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input or constant. `requires_grad` leaves receive a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let trainable = store.is_trainable(id);
        let v = self.push("param", store.get(id).clone(), Op::Param, trainable)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", value, Op::MatMul(a, b), ng)
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_t", self.value(a))?;
        let (n, k2) = dims2("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m},{k}] @ [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul_t", Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("add", value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", value, Op::Mul(a, b), ng)
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (m, n) = dims2(op, self.value(a))?;
        let (r, n2) = dims2(op, self.value(row))?;
        if r != 1 || n != n2 {
            return Err(Error::shape(op, format!("[{m},{n}] with row [{r},{n2}]")));
        }
        let va = self.value(a).data();
        let vr = self.value(row).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(va[i * n..(i + 1) * n].iter().zip(vr).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(self.value(a).shape().to_vec(), out)
    }

    /// `[m, n] + [1, n]`, the row broadcast over every position.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(row);
        self.push("add_row", value, Op::AddRow(a, row), ng)
    }

    /// `[m, n] * [1, n]` elementwise per row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(row);
        self.push("mul_row", value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push("scale", value, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push("relu", value, Op::Relu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push("silu", value, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push("tanh", value, Op::Tanh(a), ng)
    }

    /// Elementwise `|x|`; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push("abs", value, Op::Abs(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let n = value.cols();
        for row in value.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push("softmax_rows", value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let n = value.cols();
        for row in value.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let mut value = self.value(a).clone();
        let n = value.cols();
        let nf = T::of(n as f64);
        let mut rstd = Vec::with_capacity(value.rows());
        for row in value.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.ng(a);
        self.push("layer_norm_rows", value, Op::LayerNormRows { x: a, rstd }, ng)
    }

    /// Normalizes every row to unit Euclidean norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let n = value.cols();
        let mut norms = Vec::with_capacity(value.rows());
        for row in value.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::ZeroNorm);
            }
            for x in row.iter_mut() {
                *x = *x / norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(a);
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows { x: a, norms }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.value(p))?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_cols", Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.value(p))?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("col counts {n} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_rows", Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.value(a))?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {n}", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        self.push("slice_cols", Tensor::new(vec![m, len], out)?, Op::SliceCols { x: a, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_rows", self.value(a))?;
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}..{} of {m}", start + len)));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        self.push("slice_rows", Tensor::new(vec![len, n], out)?, Op::SliceRows { x: a, start }, ng)
    }

    /// Row gather; serves embedding lookup, broadcasting and length regulation.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = dims2("gather_rows", self.value(a))?;
        if index.is_empty() {
            return Err(Error::Empty("gather_rows index"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::shape("gather_rows", format!("row {i} of {m}")));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(a);
        let value = Tensor::new(vec![index.len(), n], out)?;
        self.push("gather_rows", value, Op::GatherRows { x: a, index: index.to_vec() }, ng)
    }

    /// Repeats a `[1, n]` row `times` times.
    pub fn broadcast_rows(&mut self, row: Var, times: usize) -> Result<Var> {
        self.gather_rows(row, &vec![0; times])
    }

    /// Time-axis patch extraction for same-padded 1-D convolution with an odd
    /// kernel: `[T, C] -> [T, kernel * C]`.
    pub fn im2col(&mut self, a: Var, kernel: usize) -> Result<Var> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("conv kernel must be odd, got {kernel}")));
        }
        let (t, c) = dims2("im2col", self.value(a))?;
        let pad = kernel / 2;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); t * kernel * c];
        for row in 0..t {
            for j in 0..kernel {
                let s = row as isize + j as isize - pad as isize;
                if s < 0 || s >= t as isize {
                    continue;
                }
                let s = s as usize;
                let dst = row * kernel * c + j * c;
                out[dst..dst + c].copy_from_slice(&src[s * c..(s + 1) * c]);
            }
        }
        let ng = self.ng(a);
        self.push("im2col", Tensor::new(vec![t, kernel * c], out)?, Op::Im2Col { x: a, kernel }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let ng = self.ng(a);
        self.push("transpose", value, Op::Transpose(a), ng)
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("mean_rows", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng(a);
        self.push("mean_rows", Tensor::new(vec![1, n], out)?, Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push("sum", value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let ng = self.ng(a);
        self.push("mean", value, Op::Mean(a), ng)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let total: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(total / T::of(va.len() as f64));
        let ng = self.ng(a) || self.ng(b);
        self.push("mse", value, Op::Mse(a, b), ng)
    }

    /// Dot product of two same-shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2("matmul", va)?;
                let n = vb.cols();
                if self.ng(*a) {
                    // g [m,n] @ b^T [n,k]
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                    self.acc(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.ng(*b) {
                    // a^T [k,m] @ g [m,n]
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                    self.acc(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2("matmul_t", va)?;
                let n = vb.rows();
                if self.ng(*a) {
                    // g [m,n] @ b [n,k]
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), k as isize, 1, T::zero(), &mut ga, k as isize, 1);
                    self.acc(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.ng(*b) {
                    // g^T [n,m] @ a [m,k]
                    let mut gb = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), g.data(), 1, n as isize, va.data(), k as isize, 1, T::zero(), &mut gb, k as isize, 1);
                    self.acc(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*r) {
                    self.acc(grads, *r, column_sums(g)?);
                }
            }
            Op::MulRow(a, r) => {
                let (va, vr) = (self.value(*a), self.value(*r));
                let n = va.cols();
                if self.ng(*a) {
                    let d = g.data().iter().enumerate().map(|(i, &x)| x * vr.data()[i % n]).collect();
                    self.acc(grads, *a, Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.ng(*r) {
                    let mut gr = vec![T::zero(); n];
                    for (i, (&x, &y)) in g.data().iter().zip(va.data()).enumerate() {
                        gr[i % n] += x * y;
                    }
                    self.acc(grads, *r, Tensor::new(vr.shape().to_vec(), gr)?);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * *c)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                self.acc(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| {
                        let s = T::one() / (T::one() + (-xv).exp());
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect();
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else if xv < T::zero() { -gv } else { T::zero() })
                    .collect();
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                    let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - s);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LogSoftmaxRows(a) => {
                let n = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                    let s: T = gr.iter().copied().sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * s;
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LayerNormRows { x, rstd } => {
                let n = y.cols();
                let nf = T::of(n as f64);
                let mut d = vec![T::zero(); y.len()];
                for (((dr, gr), yr), &r) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)).zip(rstd) {
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = r * (gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for (((dr, gr), yr), &nm) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)).zip(norms) {
                    let gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * gy) / nm;
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::ConcatCols(parts) => {
                let m = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(grads, p, Tensor::new(self.value(p).shape().to_vec(), d)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.acc(grads, p, Tensor::new(self.value(p).shape().to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (m, n) = dims2("slice_cols", src)?;
                let w = y.cols();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.acc(grads, *x, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let n = src.cols();
                let mut d = vec![T::zero(); src.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::GatherRows { x, index } => {
                let src = self.value(*x);
                let n = src.cols();
                let mut d = vec![T::zero(); src.len()];
                for (row, &i) in index.iter().enumerate() {
                    for (o, &gv) in d[i * n..(i + 1) * n].iter_mut().zip(&g.data()[row * n..(row + 1) * n]) {
                        *o += gv;
                    }
                }
                self.acc(grads, *x, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::Im2Col { x, kernel } => {
                let src = self.value(*x);
                let (t, c) = dims2("im2col", src)?;
                let pad = kernel / 2;
                let mut d = vec![T::zero(); t * c];
                for row in 0..t {
                    for j in 0..*kernel {
                        let s = row as isize + j as isize - pad as isize;
                        if s < 0 || s >= t as isize {
                            continue;
                        }
                        let s = s as usize;
                        let from = row * kernel * c + j * c;
                        for (o, &gv) in d[s * c..(s + 1) * c].iter_mut().zip(&g.data()[from..from + c]) {
                            *o += gv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()?),
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let m = src.rows();
                let inv = T::one() / T::of(m as f64);
                let row: Vec<T> = g.data().iter().map(|&x| x * inv).collect();
                let d = row.iter().copied().cycle().take(src.len()).collect();
                self.acc(grads, *a, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                self.acc(grads, *a, Tensor::full(src.shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let v = g.data()[0] / T::of(src.len() as f64);
                self.acc(grads, *a, Tensor::full(src.shape(), v));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = T::of(2.0) * g.data()[0] / T::of(va.len() as f64);
                let d: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| c * (x - y)).collect();
                if self.ng(*b) {
                    self.acc(grads, *b, Tensor::new(vb.shape().to_vec(), d.iter().map(|&x| -x).collect())?);
                }
                self.acc(grads, *a, Tensor::new(va.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let n = g.cols();
    let mut out = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::new(vec![1, n], out)
}
