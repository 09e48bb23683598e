use crate::error::{Error, Result};

use super::graph::{sigmoid, Graph, Node, Op, Unary, Var};
use super::{Scalar, Tensor};

/// Gradients of one scalar loss. Only nodes that require grad ever get a slot.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, graph: &Graph<S>, v: Var) -> Option<Tensor<S>> {
        self.get(v)
            .map(|g| Tensor::new(graph.shape(v), g.to_vec()).expect("grad shape"))
    }

    /// Number of nodes holding gradient storage.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn slot<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
}

impl<S: Scalar> Graph<S> {
    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = node.value.data();
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! with_slot {
            ($v:expr, |$s:ident| $body:expr) => {
                if let Some($s) = slot(grads, nodes, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_slot!(*a, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                with_slot!(*b, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                with_slot!(*b, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_slot!(*a, |s| {
                    for k in 0..g.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                with_slot!(*b, |s| {
                    for k in 0..g.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, c) => {
                with_slot!(*a, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c));
            }
            Op::AddBias(x, b) => {
                with_slot!(*x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                with_slot!(*b, |s| {
                    let n = s.len();
                    for row in g.chunks(n) {
                        for (sb, &gr) in s.iter_mut().zip(row) {
                            *sb += gr;
                        }
                    }
                });
            }
            Op::ScaleRows(x, sc) => {
                let (xv, sv) = (val(*x), val(*sc));
                let cols = node.value.cols();
                with_slot!(*x, |s| {
                    for (r, (srow, grow)) in s.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        for (a, &b) in srow.iter_mut().zip(grow) {
                            *a += b * sv[r];
                        }
                    }
                });
                with_slot!(*sc, |s| {
                    for (r, (xrow, grow)) in xv.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        s[r] += xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<S>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                with_slot!(*a, |s| S::gemm(
                    m,
                    n,
                    k,
                    g,
                    (n as isize, 1),
                    bv,
                    (1, n as isize),
                    S::one(),
                    s
                ));
                with_slot!(*b, |s| S::gemm(
                    k,
                    m,
                    n,
                    av,
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    S::one(),
                    s
                ));
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                with_slot!(*a, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Unary(a, kind) => {
                let av = val(*a);
                with_slot!(*a, |s| {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Sigmoid => out[k] * (S::one() - out[k]),
                            Unary::Tanh => S::one() - out[k] * out[k],
                            Unary::Swish => {
                                let sg = sigmoid(av[k]);
                                sg + av[k] * sg * (S::one() - sg)
                            }
                        };
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let c = node.value.cols();
                with_slot!(*x, |s| {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let base = r * 2 * c;
                        for j in 0..c {
                            let a = xv[base + j];
                            let sb = sigmoid(xv[base + c + j]);
                            s[base + j] += grow[j] * sb;
                            s[base + c + j] += grow[j] * a * sb * (S::one() - sb);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                with_slot!(*x, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                with_slot!(*x, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let total: S = grow.iter().copied().sum();
                        for j in 0..c {
                            srow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gm = val(*gamma);
                with_slot!(*x, |s| {
                    let n = S::of(c as f64);
                    for (r, grow) in g.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for j in 0..c {
                            let d = grow[j] * gm[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        for j in 0..c {
                            let d = grow[j] * gm[j];
                            s[r * c + j] += rstd[r] / n * (n * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
                with_slot!(*gamma, |s| {
                    for (grow, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += grow[j] * xh[j];
                        }
                    }
                });
                with_slot!(*beta, |s| {
                    for grow in g.chunks(c) {
                        for j in 0..c {
                            s[j] += grow[j];
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gs = c / groups;
                let gm = val(*gamma);
                with_slot!(*x, |s| {
                    let n = S::of(gs as f64);
                    for (r, grow) in g.chunks(c).enumerate() {
                        for grp in 0..*groups {
                            let rs = rstd[r * groups + grp];
                            let range = grp * gs..(grp + 1) * gs;
                            let mut sum_d = S::zero();
                            let mut sum_dx = S::zero();
                            for j in range.clone() {
                                let d = grow[j] * gm[j];
                                sum_d += d;
                                sum_dx += d * xhat[r * c + j];
                            }
                            for j in range {
                                let d = grow[j] * gm[j];
                                s[r * c + j] += rs / n * (n * d - sum_d - xhat[r * c + j] * sum_dx);
                            }
                        }
                    }
                });
                with_slot!(*gamma, |s| {
                    for (grow, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += grow[j] * xh[j];
                        }
                    }
                });
                with_slot!(*beta, |s| {
                    for grow in g.chunks(c) {
                        for j in 0..c {
                            s[j] += grow[j];
                        }
                    }
                });
            }
            Op::DepthwiseConv1d(x, w) => {
                let (t, c) = (node.value.shape()[0], node.value.shape()[1]);
                let k = nodes[w.0].value.shape()[0];
                let pad = k / 2;
                let (xv, wv) = (val(*x), val(*w));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            f(ti, kk, src - pad);
                        }
                    }
                };
                with_slot!(*x, |s| taps(&mut |ti, kk, src| {
                    for j in 0..c {
                        s[src * c + j] += g[ti * c + j] * wv[kk * c + j];
                    }
                }));
                with_slot!(*w, |s| taps(&mut |ti, kk, src| {
                    for j in 0..c {
                        s[kk * c + j] += g[ti * c + j] * xv[src * c + j];
                    }
                }));
            }
            Op::Conv2d(x, kern) => {
                let (h, w) = (node.value.shape()[0], node.value.shape()[1]);
                let (kh, kw) = (nodes[kern.0].value.shape()[0], nodes[kern.0].value.shape()[1]);
                let (ph, pw) = (kh / 2, kw / 2);
                let (xv, kv) = (val(*x), val(*kern));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for i in 0..h {
                        for a in 0..kh {
                            let si = i + a;
                            if si < ph || si - ph >= h {
                                continue;
                            }
                            for j in 0..w {
                                for b in 0..kw {
                                    let sj = j + b;
                                    if sj < pw || sj - pw >= w {
                                        continue;
                                    }
                                    f(i * w + j, a * kw + b, (si - ph) * w + sj - pw);
                                }
                            }
                        }
                    }
                };
                with_slot!(*x, |s| taps(&mut |o, kk, src| s[src] += g[o] * kv[kk]));
                with_slot!(*kern, |s| taps(&mut |o, kk, src| s[kk] += g[o] * xv[src]));
            }
            Op::Embedding(table, ids) => {
                let d = node.value.cols();
                with_slot!(*table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                with_slot!(*x, |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        s[i] += g[k];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.cols();
                    with_slot!(p, |s| {
                        for (r, srow) in s.chunks_mut(pc).enumerate() {
                            for j in 0..pc {
                                srow[j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    with_slot!(p, |s| {
                        for j in 0..n {
                            s[j] += g[offset + j];
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let c = nodes[x.0].value.cols();
                let len = node.value.cols();
                with_slot!(*x, |s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            s[r * c + start + j] += grow[j];
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let c = node.value.cols();
                with_slot!(*x, |s| {
                    for (k, &gv) in g.iter().enumerate() {
                        s[start * c + k] += gv;
                    }
                });
            }
            Op::Reshape(x) => {
                with_slot!(*x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::PadRows(x) => {
                with_slot!(*x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Sum(x) => {
                with_slot!(*x, |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(x) => {
                with_slot!(*x, |s| {
                    let k = g[0] / S::of(s.len() as f64);
                    s.iter_mut().for_each(|s| *s += k);
                });
            }
            Op::SumCols(x) => {
                let c = nodes[x.0].value.cols();
                with_slot!(*x, |s| {
                    for (srow, &gr) in s.chunks_mut(c).zip(g) {
                        srow.iter_mut().for_each(|s| *s += gr);
                    }
                });
            }
            Op::MeanRows(x) => {
                let c = node.value.cols();
                with_slot!(*x, |s| {
                    let inv = S::one() / S::of((s.len() / c) as f64);
                    for srow in s.chunks_mut(c) {
                        for j in 0..c {
                            srow[j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                with_slot!(*x, |s| {
                    for k in 0..g.len() {
                        s[k] += g[k] * mask[k];
                    }
                });
            }
            Op::StraightThrough(x) => {
                with_slot!(*x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::NormalizeRows(x, norms) => {
                let c = node.value.cols();
                with_slot!(*x, |s| {
                    for (r, (srow, grow)) in s.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let y = &out[r * c..(r + 1) * c];
                        let dot: S = y.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            srow[j] += (grow[j] - y[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (n, d) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let m = nodes[b.0].value.shape()[0];
                let (av, bv) = (val(*a), val(*b));
                let two = S::of(2.0);
                with_slot!(*a, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j] * two;
                            for k in 0..d {
                                s[i * d + k] += gij * (av[i * d + k] - bv[j * d + k]);
                            }
                        }
                    }
                });
                with_slot!(*b, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j] * two;
                            for k in 0..d {
                                s[j * d + k] += gij * (bv[j * d + k] - av[i * d + k]);
                            }
                        }
                    }
                });
            }
            Op::Entropy(p) => {
                let pv = val(*p);
                with_slot!(*p, |s| {
                    for k in 0..s.len() {
                        if pv[k] > S::zero() {
                            s[k] -= g[0] * (pv[k].ln() + S::one());
                        }
                    }
                });
            }
            Op::Precomputed(x, grad) => {
                with_slot!(*x, |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * grad[k];
                    }
                });
            }
        }
    }
}
