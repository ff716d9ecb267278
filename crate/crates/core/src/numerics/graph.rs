//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] records every value it produces. Calling [`Graph::backward`]
//! on a scalar node walks the record in reverse and returns exact
//! vector-Jacobian products for every node created with [`Graph::input`].

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, transpose};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf: gradients are reported for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a: [.., k] · b: [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(sa) / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut c = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, c)?, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]`, or with `[g, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", &[sa, sb]));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut c = vec![T::zero(); g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            let ab = &ad[gi * m * k..(gi + 1) * m * k];
            let bb = &bd[gi * k * n..(gi + 1) * k * n];
            let cb = &mut c[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![g, m, n], c)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn bcast(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let data: Vec<T> = if bd.len() == 1 {
            ta.data().iter().map(|&x| f(x, bd[0])).collect()
        } else if is_suffix(ta.shape(), tb.shape()) {
            ta.data()
                .chunks_exact(bd.len())
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            return Err(Error::shape(name, &[ta.shape(), tb.shape()]));
        };
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s, or `b` holds
    /// a single element.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.bcast("add_bcast", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddBcast(a, b), rg))
    }

    /// `a * b` with the broadcasting rule of [`Graph::add_bcast`].
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.bcast("mul_bcast", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MulBcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let t = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Normalises each row over the last axis to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(LN_EPS);
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            inv_std.push(r);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Divides each last-axis row by its L2 norm. Zero rows are an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut out = ta.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::NonFinite(
                    "l2_normalize: zero-norm or non-finite feature".into(),
                ));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::L2Normalize { x: a, norms }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != sa.len() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::shape("permute", &[&sa, perm]));
        }
        let (data, shape) = permute_data(self.value(a).data(), &sa, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Transpose of a 2-D value.
    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Views `a` as `[rows, last_dim]` and selects rows by index (rows may
    /// repeat). Output shape `[idx.len(), last_dim]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.last_dim();
        let rows = ta.rows();
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", &[ta.shape(), &[0]]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", &[ta.shape(), &[bad]]));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &[&first, &[axis]]));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &[&first, s]));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let inner: usize = t.shape()[axis..].iter().product();
                out.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let c = tl.last_dim();
        if tl.rows() != targets.len() || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape("cross_entropy", &[tl.shape(), &[targets.len()]]));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= T::of(targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match (&n.op, grads[i].take()) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Grads { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k;
                self.accumulate(grads, *a, |ga| gemm_nt(dy, tb.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(ta.data(), dy, gb, m, k, n));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (ta.data(), tb.data());
                self.accumulate(grads, *a, |ga| {
                    for gi in 0..g {
                        let dyb = &dy[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let gab = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            // C = A Bᵀ, B: [n, k] -> dA = dC B
                            gemm_nn(dyb, bb, gab, m, n, k);
                        } else {
                            gemm_nt(dyb, bb, gab, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for gi in 0..g {
                        let dyb = &dy[gi * m * n..(gi + 1) * m * n];
                        let ab = &ad[gi * m * k..(gi + 1) * m * k];
                        let gbb = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // dB = dCᵀ A : [n, k]
                            gemm_tn(dyb, ab, gbb, m, n, k);
                        } else {
                            gemm_tn(ab, dyb, gbb, m, k, n);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                self.accumulate(grads, *b, |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                self.accumulate(grads, *b, |g| g.iter_mut().zip(dy).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |g| {
                    g.iter_mut()
                        .zip(dy.iter().zip(tb.data()))
                        .for_each(|(x, (&d, &v))| *x += d * v)
                });
                self.accumulate(grads, *b, |g| {
                    g.iter_mut()
                        .zip(dy.iter().zip(ta.data()))
                        .for_each(|(x, (&d, &v))| *x += d * v)
                });
            }
            Op::AddBcast(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                self.accumulate(grads, *b, |g| {
                    let w = g.len();
                    for chunk in dy.chunks_exact(w) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::MulBcast(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bd = tb.data();
                let w = bd.len();
                self.accumulate(grads, *a, |g| {
                    for (gc, dc) in g.chunks_exact_mut(w).zip(dy.chunks_exact(w)) {
                        gc.iter_mut()
                            .zip(dc.iter().zip(bd))
                            .for_each(|(x, (&d, &v))| *x += d * v);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (dc, ac) in dy.chunks_exact(w).zip(ta.data().chunks_exact(w)) {
                        g.iter_mut()
                            .zip(dc.iter().zip(ac))
                            .for_each(|(x, (&d, &v))| *x += d * v);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(x, &d)| *x += d * *c));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |g| {
                    g.iter_mut()
                        .zip(dy.iter().zip(y))
                        .for_each(|(x, (&d, &v))| *x += d * v)
                });
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                self.accumulate(grads, *a, |g| {
                    for ((gx, &d), &x) in g.iter_mut().zip(dy).zip(ta.data()) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let du = c * (T::one() + three * k * x * x);
                        *gx += d * (half * (T::one() + t) + half * x * (T::one() - t * t) * du);
                    }
                });
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                self.accumulate(grads, *a, |g| {
                    for ((gr, dr), yr) in g.chunks_exact_mut(d).zip(dy.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((gx, &dv), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *gx += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = node.value.last_dim();
                self.accumulate(grads, *a, |g| {
                    for ((gr, dr), yr) in g.chunks_exact_mut(d).zip(dy.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let total: T = dr.iter().copied().sum();
                        for ((gx, &dv), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *gx += dv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let d = node.value.last_dim();
                let inv_d = T::of(1.0 / d as f64);
                self.accumulate(grads, *x, |g| {
                    for (((gr, dr), yr), &r) in g
                        .chunks_exact_mut(d)
                        .zip(dy.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                        .zip(inv_std)
                    {
                        let mean_d: T = dr.iter().copied().sum::<T>() * inv_d;
                        let mean_dy: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for ((gx, &dv), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *gx += r * (dv - mean_d - yv * mean_dy);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *x, |g| {
                    for (((gr, dr), yr), &n) in g
                        .chunks_exact_mut(d)
                        .zip(dy.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                        .zip(norms)
                    {
                        let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((gx, &dv), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *gx += (dv - yv * dot) / n;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(dy, node.value.shape(), &inv);
                self.accumulate(grads, *x, |g| add_into(g, &back));
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *x, |g| {
                    for (dr, &i) in dy.chunks_exact(d).zip(idx) {
                        add_into(&mut g[i * d..(i + 1) * d], dr);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let total_inner: usize = shape[*axis..].iter().product();
                let mut offset = 0;
                for &x in xs {
                    let inner: usize = self.shape(x)[*axis..].iter().product();
                    self.accumulate(grads, x, |g| {
                        for o in 0..outer {
                            let src = &dy[o * total_inner + offset..o * total_inner + offset + inner];
                            add_into(&mut g[o * inner..(o + 1) * inner], src);
                        }
                    });
                    offset += inner;
                }
            }
            Op::Sum(a) => {
                let d = dy[0];
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|x| *x += d));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let d = dy[0] / T::of(n as f64);
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|x| *x += d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = dy[0] / T::of(targets.len() as f64);
                self.accumulate(grads, *logits, |g| {
                    for ((gr, pr), &t) in g.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(targets) {
                        for (j, (gx, &p)) in gr.iter_mut().zip(pr).enumerate() {
                            let target = if j == t { T::one() } else { T::zero() };
                            *gx += scale * (p - target);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(g: &mut [T], d: &[T]) {
    g.iter_mut().zip(d).for_each(|(x, &v)| *x += v);
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// Permutes a row-major array. Returns the new data and shape.
pub(crate) fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if nd == 2 && perm == [1, 0] {
        return (transpose(data, shape[0], shape[1]), out_shape);
    }
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    // Contiguous innermost block when the last axis stays in place.
    let (block, outer_nd) = if nd > 0 && perm[nd - 1] == nd - 1 {
        (shape[nd - 1], nd - 1)
    } else {
        (1, nd)
    };
    let mut counter = vec![0usize; outer_nd];
    let total = data.len() / block;
    let mut offset = 0usize;
    for _ in 0..total {
        out.extend_from_slice(&data[offset..offset + block]);
        for ax in (0..outer_nd).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}
