use crate::error::{Error, Result};

use super::counter_rng::{self, DropoutKey};
use super::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Swish,
}

pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Unary(Var, Unary),
    Glu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    DepthwiseConv1d(Var, Var),
    Conv2d(Var, Var),
    Embedding(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    PadRows(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    Dropout(Var, Vec<S>),
    StraightThrough(Var),
    NormalizeRows(Var, Vec<S>),
    SqDist(Var, Var),
    Entropy(Var),
    Precomputed(Var, Vec<S>),
}

impl<S> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | ScaleRows(a, b) | MatMul(a, b)
            | DepthwiseConv1d(a, b) | Conv2d(a, b) | SqDist(a, b) => vec![*a, *b],
            Scale(a, _)
            | Transpose(a)
            | Unary(a, _)
            | Glu(a)
            | Softmax(a)
            | LogSoftmax(a)
            | Embedding(a, _)
            | Gather(a, _)
            | SliceCols(a, _)
            | SliceRows(a, _)
            | Reshape(a)
            | PadRows(a)
            | Sum(a)
            | Mean(a)
            | SumCols(a)
            | MeanRows(a)
            | Dropout(a, _)
            | StraightThrough(a)
            | NormalizeRows(a, _)
            | Entropy(a)
            | Precomputed(a, _) => vec![*a],
            LayerNorm { x, gamma, beta, .. } | GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Tape of tensor operations in creation (topological) order.
///
/// Every op appends one node; `backward` walks the tape in reverse once.
pub struct Graph<S = f32> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && !value.all_finite() {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.all_finite());
            debug_assert!(!finite_inputs, "non-finite output from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::contract(format!("{op}: expected rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let va = self.value(a);
        Tensor::new(va.shape(), va.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `x + b` with `b` broadcast along every leading dimension of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(b).len() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// Multiplies row `r` of `x` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(s).len() != rows {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let cols = self.value(x).cols();
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (row, &k) in out.data_mut().chunks_mut(cols).zip(sv) {
            for o in row {
                *o *= k;
            }
        }
        Ok(self.push(out, Op::ScaleRows(x, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            S::zero(),
            &mut out,
        );
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let va = self.value(a).data();
        let data = (0..r * c).map(|i| va[(i % r) * c + i / r]).collect();
        let out = Tensor::new(&[c, r], data)?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let v = match kind {
            Unary::Sigmoid => self.map(a, sigmoid),
            Unary::Tanh => self.map(a, |x| x.tanh()),
            Unary::Swish => self.map(a, |x| x * sigmoid(x)),
        };
        self.push(v, Op::Unary(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Swish)
    }

    /// Gated linear unit over the last dim: `[a; b] -> a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c2 = t.cols();
        if !c2.is_multiple_of(2) {
            return Err(Error::contract(format!("glu: odd last dim {c2}")));
        }
        let c = c2 / 2;
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * c);
        for r in 0..rows {
            let row = t.row(r);
            for j in 0..c {
                data.push(row[j] * sigmoid(row[c + j]));
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Glu(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.clone();
        for (o, row) in out.data_mut().chunks_mut(c).zip(t.data().chunks(c)) {
            softmax_row(row, o);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(x))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = self.value(x).cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(op, self.shape(x), self.shape(gamma)));
        }
        Ok(c)
    }

    /// Normalizes each row over the last dim, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.check_affine("layer_norm", x, gamma, beta)?;
        let t = self.value(x);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let n = S::of(c as f64);
        let eps = S::of(NORM_EPS);
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gm[j] + bt[j]);
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Per-row group normalization: the last dim is split into `groups`
    /// contiguous channel groups, each normalized on its own.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let c = self.check_affine("group_norm", x, gamma, beta)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let gs = c / groups;
        let t = self.value(x);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let n = S::of(gs as f64);
        let eps = S::of(NORM_EPS);
        let mut xhat = vec![S::zero(); t.len()];
        let mut rstd = Vec::with_capacity(t.rows() * groups);
        let mut out = vec![S::zero(); t.len()];
        for (r, row) in t.data().chunks(c).enumerate() {
            for g in 0..groups {
                let seg = &row[g * gs..(g + 1) * gs];
                let mean = seg.iter().copied().sum::<S>() / n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
                let rs = S::one() / (var + eps).sqrt();
                rstd.push(rs);
                for (k, &v) in seg.iter().enumerate() {
                    let j = g * gs + k;
                    let h = (v - mean) * rs;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gm[j] + bt[j];
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    /// Per-channel convolution over time with same padding.
    /// `x: [T x C]`, `w: [K x C]`, `K` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.rank2("depthwise_conv1d", x)?;
        let (k, c2) = self.rank2("depthwise_conv1d", w)?;
        if c != c2 || k % 2 == 0 {
            return Err(Error::shape("depthwise_conv1d", self.shape(x), self.shape(w)));
        }
        let pad = k / 2;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![S::zero(); t * c];
        for ti in 0..t {
            for kk in 0..k {
                let src = ti + kk;
                if src < pad || src - pad >= t {
                    continue;
                }
                let src = src - pad;
                let (o, xs, ws) = (
                    &mut out[ti * c..(ti + 1) * c],
                    &xv[src * c..(src + 1) * c],
                    &wv[kk * c..(kk + 1) * c],
                );
                for j in 0..c {
                    o[j] += ws[j] * xs[j];
                }
            }
        }
        let out = Tensor::new(&[t, c], out)?;
        Ok(self.push(out, Op::DepthwiseConv1d(x, w)))
    }

    /// Single-channel 2-D convolution with same padding. Kernel dims odd.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (h, w) = self.rank2("conv2d", x)?;
        let (kh, kw) = self.rank2("conv2d", kernel)?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!("conv2d: kernel dims must be odd, got {kh}x{kw}")));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![S::zero(); h * w];
        for i in 0..h {
            for a in 0..kh {
                let si = i + a;
                if si < ph || si - ph >= h {
                    continue;
                }
                let si = si - ph;
                for j in 0..w {
                    let mut acc = S::zero();
                    for b in 0..kw {
                        let sj = j + b;
                        if sj < pw || sj - pw >= w {
                            continue;
                        }
                        acc += kv[a * kw + b] * xv[si * w + sj - pw];
                    }
                    out[i * w + j] += acc;
                }
            }
        }
        let out = Tensor::new(&[h, w], out)?;
        Ok(self.push(out, Op::Conv2d(x, kernel)))
    }

    /// Row lookup: `table: [V x D]`, returns `[ids.len() x D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rank2("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("embedding: id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(out, Op::Embedding(table, ids.to_vec())))
    }

    /// Flat element gather: `out.flat[i] = x.flat[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("gather: index {bad} out of range for {n} elements")));
        }
        let xv = self.value(x).data();
        let out = Tensor::new(shape, idx.iter().map(|&i| xv[i]).collect())?;
        Ok(self.push(out, Op::Gather(x, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let (r, _) = self.rank2("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.rank2("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let (_, c) = self.rank2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.rank2("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::new(&[r, len], data)?;
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(&[len, c], data)?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Appends zero rows until `x` has `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.rank2("pad_rows", x)?;
        if rows < r {
            return Err(Error::shape("pad_rows", self.shape(x), &[rows, c]));
        }
        let mut data = self.value(x).data().to_vec();
        data.resize(rows * c, S::zero());
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.push(out, Op::PadRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / S::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sum over the last dim: `[R x C] -> [R x 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let data: Vec<S> = t.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::new(&[data.len(), 1], data).expect("non-empty");
        self.push(out, Op::SumCols(x))
    }

    /// Mean over rows: `[R x C] -> [1 x C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![S::zero(); c];
        for row in t.data().chunks(c) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let inv = S::one() / S::of(r as f64);
        data.iter_mut().for_each(|d| *d *= inv);
        let out = Tensor::new(&[1, c], data).expect("non-empty");
        self.push(out, Op::MeanRows(x))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, key: DropoutKey, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let stream = key.stream();
        let keep = S::of(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(x).len() as u64)
            .map(|i| {
                if counter_rng::uniform(stream, i) < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::Dropout(x, mask)))
    }

    /// Forward value taken from `value`; gradient passed to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor<S>) -> Result<Var> {
        if value.shape() != self.shape(x) {
            return Err(Error::shape("straight_through", self.shape(x), value.shape()));
        }
        Ok(self.push(value, Op::StraightThrough(x)))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let floor = S::of(1e-12);
        let norms: Vec<S> = t
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|&v| v * v).sum::<S>().sqrt().max(floor))
            .collect();
        let mut out = t.clone();
        for (row, &n) in out.data_mut().chunks_mut(c).zip(&norms) {
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        self.push(out, Op::NormalizeRows(x, norms))
    }

    /// Squared Euclidean distances between rows: `[N x D], [M x D] -> [N x M]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.rank2("sq_dist", a)?;
        let (m, d2) = self.rank2("sq_dist", b)?;
        if d != d2 {
            return Err(Error::shape("sq_dist", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = av.row(i);
            for j in 0..m {
                data.push(ai.iter().zip(bv.row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        let out = Tensor::new(&[n, m], data)?;
        Ok(self.push(out, Op::SqDist(a, b)))
    }

    /// Shannon entropy `-sum p ln p` of all elements (zero terms contribute 0).
    pub fn entropy(&mut self, p: Var) -> Var {
        let h = -self
            .value(p)
            .data()
            .iter()
            .filter(|&&v| v > S::zero())
            .map(|&v| v * v.ln())
            .sum::<S>();
        self.push(Tensor::scalar(h), Op::Entropy(p))
    }

    /// Scalar node whose value and input gradient were computed externally.
    pub fn precomputed_scalar(&mut self, x: Var, value: S, grad: Vec<S>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::shape("precomputed_scalar", self.shape(x), &[grad.len()]));
        }
        Ok(self.push(Tensor::scalar(value), Op::Precomputed(x, grad)))
    }
}
