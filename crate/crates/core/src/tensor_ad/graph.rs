//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so the node list is
//! already topologically sorted; [`Graph::backward`] walks it once in reverse.
//! Gradients of leaves accumulate across backward calls until
//! [`Graph::zero_grad`].

use std::collections::HashMap;

use super::tensor::{matrix_dims, Real, Tensor};
use crate::error::{FipError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Row index lists for gather/scatter, one list per batch element.
pub type RowIndex = Vec<Vec<usize>>;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, c: T },
    Transpose { a: Var },
    Reshape { a: Var },
    GatherRows { a: Var, idx: RowIndex },
    ScatterRows { a: Var, idx: RowIndex },
    ConcatRows { parts: Vec<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Softmax { a: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    MeanRows { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::MeanRows { .. } => "mean_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Tensor<T>>,
    check_finite: bool,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> FipError {
    FipError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_rows<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            check_finite: cfg!(debug_assertions),
            first_nonfinite: None,
        }
    }

    /// Turns the per-op NaN/Inf check on or off (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// First op (node id, op name) whose output contained a NaN or Inf.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.check_finite && self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A fixed input; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// `a [.., m, k] @ b`, where `b` is either a shared `[k, n]` matrix or a
    /// stack with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (ba, m, k) = matrix_dims(&sa);
        let (bb, k2, n) = matrix_dims(&sb);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); ba * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if shared {
            T::gemm(ba * m, k, n, av, (k as isize, 1), bv, (n as isize, 1), T::zero(), &mut out, n as isize);
        } else {
            debug_assert_eq!(ba, bb);
            for i in 0..ba {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    (k as isize, 1),
                    &bv[i * k * n..],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[i * m * n..],
                    n as isize,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// `a + b` where `b` has the shape of `a` or of a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let shape = sa.to_vec();
        let bv = self.value(b).data();
        let period = bv.len().max(1);
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % period])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect()).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(mismatch("transpose", &s, &[]));
        }
        let (b, m, n) = matrix_dims(&s);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            let off = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { a }, rg))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Picks rows (second-to-last axis) per batch element. A 2-D source is
    /// shared by every index list; otherwise there is one list per batch element.
    /// Repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: RowIndex) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || idx.is_empty() {
            return Err(mismatch("gather_rows", &s, &[idx.len()]));
        }
        let (ba, n, d) = matrix_dims(&s);
        let k = idx[0].len();
        if idx.iter().any(|r| r.len() != k) || (ba != idx.len() && ba != 1) {
            return Err(mismatch("gather_rows", &s, &[idx.len(), k]));
        }
        if let Some(&bad) = idx.iter().flatten().find(|&&i| i >= n) {
            return Err(FipError::invalid(format!("gather_rows: row {bad} out of range for {s:?}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * k * d);
        for (bi, rows) in idx.iter().enumerate() {
            let base = if ba == 1 { 0 } else { bi * n * d };
            for &r in rows {
                out.extend_from_slice(&src[base + r * d..base + (r + 1) * d]);
            }
        }
        let shape = if s.len() > 2 {
            let mut sh = s[..s.len() - 2].to_vec();
            sh.extend([k, d]);
            sh
        } else if idx.len() == 1 {
            vec![k, d]
        } else {
            vec![idx.len(), k, d]
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows { a, idx }, rg))
    }

    /// Inverse placement of [`Graph::gather_rows`]: row `j` of batch element `b`
    /// is added into row `idx[b][j]` of a zero tensor with `n_rows` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: RowIndex, n_rows: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(mismatch("scatter_rows", &s, &[]));
        }
        let (ba, k, d) = matrix_dims(&s);
        if idx.len() != ba || idx.iter().any(|r| r.len() != k) {
            return Err(mismatch("scatter_rows", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().flatten().find(|&&i| i >= n_rows) {
            return Err(FipError::invalid(format!("scatter_rows: row {bad} >= {n_rows}")));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); ba * n_rows * d];
        for (bi, rows) in idx.iter().enumerate() {
            for (j, &r) in rows.iter().enumerate() {
                let from = &src[(bi * k + j) * d..(bi * k + j + 1) * d];
                let to = &mut out[(bi * n_rows + r) * d..(bi * n_rows + r + 1) * d];
                for (o, &v) in to.iter_mut().zip(from) {
                    *o += v;
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = n_rows;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScatterRows { a, idx }, rg))
    }

    /// Concatenates along the row axis; leading dims and widths must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| FipError::invalid("concat_rows of nothing"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(mismatch("concat_rows", &first, &[]));
        }
        let (b, _, d) = matrix_dims(&first);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..s.len() - 2] != first[..first.len() - 2] || s[s.len() - 1] != d {
                return Err(mismatch("concat_rows", &first, s));
            }
            total += s[s.len() - 2];
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let (_, k, _) = matrix_dims(self.shape(p));
                out.extend_from_slice(&self.value(p).data()[bi * k * d..(bi + 1) * k * d]);
            }
        }
        let mut shape = first.clone();
        let r = shape.len();
        shape[r - 2] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| mismatch("layer_norm", &s, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &s, self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let inv_d = T::from_usize(d).unwrap().recip();
        let src = self.value(x).data();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().cloned().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bta[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(s, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| T::from_f64_lossy(gelu_parts(x.as_f64()).0)).collect();
        let out = Tensor::new(t.shape().to_vec(), out).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Gelu { a }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = *t.shape().last().ok_or_else(|| mismatch("softmax", &[], &[]))?;
        let mut out = t.data().to_vec();
        softmax_rows(&mut out, cols);
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Multi-head scaled dot-product attention, `softmax(Q K^T / sqrt(dh)) V`
    /// per head, on `[.., T, d]` inputs with `d` split into `heads` slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() || s.len() < 2 {
            return Err(mismatch("attention", &s, self.shape(k)));
        }
        let (b, t, d) = matrix_dims(&s);
        if heads == 0 || d % heads != 0 {
            return Err(FipError::invalid(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * heads * t * t];
        let mut out = vec![T::zero(); b * t * d];
        let rs = d as isize;
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * t * d + h * dh;
                let p = &mut probs[(bi * heads + h) * t * t..][..t * t];
                // S = Q_h K_h^T
                T::gemm(t, dh, t, &qv[off..], (rs, 1), &kv[off..], (1, rs), T::zero(), p, t as isize);
                p.iter_mut().for_each(|x| *x *= scale);
                softmax_rows(p, t);
                T::gemm(t, t, dh, p, (t as isize, 1), &vv[off..], (rs, 1), T::zero(), &mut out[off..], rs);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(s, out)?, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Mean over the row axis: `[.., T, d] -> [.., d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(mismatch("mean_rows", &s, &[]));
        }
        let (b, t, d) = matrix_dims(&s);
        let src = self.value(a).data();
        let inv = T::from_usize(t).unwrap().recip();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for r in 0..t {
                for j in 0..d {
                    out[bi * d + j] += src[(bi * t + r) * d + j];
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= inv);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(d);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanRows { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().cloned().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let total = t.data().iter().cloned().sum::<T>() / T::from_usize(t.len().max(1)).unwrap();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Mean { a }, rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mse", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = T::from_usize(av.len().max(1)).unwrap();
        let total = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total), Op::Mse { a, b }, rg))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (_, n, c) = matrix_dims(&s);
        if s.len() != 2 || labels.len() != n {
            return Err(mismatch("cross_entropy_with_logits", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(FipError::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows(&mut probs, c);
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            total -= probs[i * c + l].max(T::min_positive_value()).ln();
        }
        total = total / T::from_usize(n.max(1)).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, adding into the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(FipError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![T::one()])?);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match self.leaf_grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            self.backward_node(id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ba, m, k) = matrix_dims(sa);
                let (_, _, n) = matrix_dims(sb);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let shared = sb.len() == 2;
                if self.rg(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    if shared {
                        // dA = dC B^T
                        T::gemm(ba * m, n, k, gd, (n as isize, 1), bv, (1, n as isize), T::zero(), &mut da, k as isize);
                    } else {
                        for i in 0..ba {
                            T::gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..],
                                (n as isize, 1),
                                &bv[i * k * n..],
                                (1, n as isize),
                                T::zero(),
                                &mut da[i * m * k..],
                                k as isize,
                            );
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if shared {
                        // dB = A^T dC over all stacked rows
                        T::gemm(k, ba * m, n, av, (1, k as isize), gd, (n as isize, 1), T::zero(), &mut db, n as isize);
                    } else {
                        for i in 0..ba {
                            T::gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..],
                                (1, k as isize),
                                &gd[i * m * n..],
                                (n as isize, 1),
                                T::zero(),
                                &mut db[i * k * n..],
                                n as isize,
                            );
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let sb = self.shape(*b).to_vec();
                    let period = sb.iter().product::<usize>().max(1);
                    let mut db = vec![T::zero(); period];
                    for (i, &x) in gd.iter().enumerate() {
                        db[i % period] += x;
                    }
                    self.accumulate(grads, *b, Tensor::new(sb, db)?);
                }
            }
            Op::Scale { a, c } => {
                let mut da = g.clone();
                da.scale_assign(*c);
                self.accumulate(grads, *a, da);
            }
            Op::Transpose { a } => {
                let sa = self.shape(*a).to_vec();
                let (b, m, n) = matrix_dims(&sa);
                let mut da = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    let off = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            da[off + i * n + j] = gd[off + j * m + i];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(sa, da)?);
            }
            Op::Reshape { a } => {
                let sa = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&sa)?);
            }
            Op::GatherRows { a, idx } => {
                if self.rg(*a) {
                    let sa = self.shape(*a).to_vec();
                    let (ba, n, d) = matrix_dims(&sa);
                    let k = idx[0].len();
                    let mut da = vec![T::zero(); ba * n * d];
                    for (bi, rows) in idx.iter().enumerate() {
                        let base = if ba == 1 { 0 } else { bi * n * d };
                        for (j, &r) in rows.iter().enumerate() {
                            let src = &gd[(bi * k + j) * d..(bi * k + j + 1) * d];
                            for (o, &v) in da[base + r * d..base + (r + 1) * d].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(sa, da)?);
                }
            }
            Op::ScatterRows { a, idx } => {
                if self.rg(*a) {
                    let sa = self.shape(*a).to_vec();
                    let (_, k, d) = matrix_dims(&sa);
                    let n = node.value.shape()[node.value.shape().len() - 2];
                    let mut da = Vec::with_capacity(sa.iter().product());
                    for (bi, rows) in idx.iter().enumerate() {
                        for &r in rows {
                            da.extend_from_slice(&gd[(bi * n + r) * d..(bi * n + r + 1) * d]);
                        }
                    }
                    debug_assert_eq!(da.len(), idx.len() * k * d);
                    self.accumulate(grads, *a, Tensor::new(sa, da)?);
                }
            }
            Op::ConcatRows { parts } => {
                let s = node.value.shape();
                let (b, total, d) = matrix_dims(s);
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p).to_vec();
                    let (_, k, _) = matrix_dims(&sp);
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(b * k * d);
                        for bi in 0..b {
                            let start = (bi * total + offset) * d;
                            dp.extend_from_slice(&gd[start..start + k * d]);
                        }
                        self.accumulate(grads, p, Tensor::new(sp, dp)?);
                    }
                    offset += k;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.value.shape().last().unwrap();
                let gv = self.value(*gamma).data();
                let rows = gd.len() / d;
                let inv_d = T::from_usize(d).unwrap().recip();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for j in 0..d {
                            let v = gd[r * d + j] * gv[j];
                            dxh[j] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxh[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![d], dg)?);
                    self.accumulate(grads, *beta, Tensor::new(vec![d], db)?);
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                let da = av
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gy)| gy * T::from_f64_lossy(gelu_parts(x.as_f64()).1))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), da)?);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut da = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in da.chunks_mut(cols).zip(y.chunks(cols)).zip(gd.chunks(cols)) {
                    let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), da)?);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = node.value.shape().to_vec();
                let (b, t, d) = matrix_dims(&s);
                let dh = d / heads;
                let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); t * t];
                let rs = d as isize;
                let ts = t as isize;
                for bi in 0..b {
                    for h in 0..*heads {
                        let off = bi * t * d + h * dh;
                        let p = &probs[(bi * heads + h) * t * t..][..t * t];
                        // dV = P^T dO
                        T::gemm(t, t, dh, p, (1, ts), &gd[off..], (rs, 1), T::zero(), &mut dv[off..], rs);
                        // dP = dO V^T
                        T::gemm(t, dh, t, &gd[off..], (rs, 1), &vv[off..], (1, rs), T::zero(), &mut dp, ts);
                        // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale
                        for r in 0..t {
                            let pr = &p[r * t..(r + 1) * t];
                            let dr = &mut dp[r * t..(r + 1) * t];
                            let dot = pr.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum::<T>();
                            for j in 0..t {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        // dQ = dS K, dK = dS^T Q
                        T::gemm(t, t, dh, &dp, (ts, 1), &kv[off..], (rs, 1), T::zero(), &mut dq[off..], rs);
                        T::gemm(t, t, dh, &dp, (1, ts), &qv[off..], (rs, 1), T::zero(), &mut dk[off..], rs);
                    }
                }
                self.accumulate(grads, *q, Tensor::new(s.clone(), dq)?);
                self.accumulate(grads, *k, Tensor::new(s.clone(), dk)?);
                self.accumulate(grads, *v, Tensor::new(s, dv)?);
            }
            Op::MeanRows { a } => {
                let sa = self.shape(*a).to_vec();
                let (b, t, d) = matrix_dims(&sa);
                let inv = T::from_usize(t).unwrap().recip();
                let mut da = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    for r in 0..t {
                        for j in 0..d {
                            da[(bi * t + r) * d + j] = gd[bi * d + j] * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(sa, da)?);
            }
            Op::Sum { a } => {
                let sa = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&sa, gd[0]));
            }
            Op::Mean { a } => {
                let sa = self.shape(*a).to_vec();
                let n = T::from_usize(sa.iter().product::<usize>().max(1)).unwrap();
                self.accumulate(grads, *a, Tensor::full(&sa, gd[0] / n));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = T::from_usize(av.len().max(1)).unwrap();
                let c = (T::one() + T::one()) * gd[0] / n;
                let diff: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * c).collect();
                let shape = self.shape(*a).to_vec();
                if self.rg(*b) {
                    let neg = diff.iter().map(|&x| -x).collect();
                    self.accumulate(grads, *b, Tensor::new(shape.clone(), neg)?);
                }
                self.accumulate(grads, *a, Tensor::new(shape, diff)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = self.shape(*logits).to_vec();
                let c = s[1];
                let n = T::from_usize(labels.len().max(1)).unwrap();
                let mut dl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * c + l] -= T::one();
                }
                let f = gd[0] / n;
                dl.iter_mut().for_each(|x| *x *= f);
                self.accumulate(grads, *logits, Tensor::new(s, dl)?);
            }
        }
        Ok(())
    }
}
