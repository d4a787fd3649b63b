//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its value and
//! whatever the backward pass needs. Nodes that depend on no
//! gradient-requiring input are stored as plain constants.

use super::{gemm, Float, KernelError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Per-feature moments of the rows being normalized.
    Batch,
    /// Stored moments, typically a running average collected in training.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Result of [`Tape::batchnorm`]. Batch moments are returned so the
/// caller can fold them into running statistics.
#[derive(Debug)]
pub struct Normalized<T> {
    pub out: Var,
    /// Per-feature mean and biased variance, present in batch mode.
    pub batch_moments: Option<(Vec<T>, Vec<T>)>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Shift { x: Var },
    Pow { x: Var, p: T },
    Tanh { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Softmax { x: Var, mask: Option<Vec<bool>>, cols: usize },
    LogSoftmax { x: Var, mask: Option<Vec<bool>>, cols: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    GatherRows { x: Var, idx: Vec<usize>, width: usize },
    GatherLast { x: Var, idx: Vec<usize>, cols: usize },
    Reshape { x: Var },
    SplitHeads { x: Var, batch: usize, nodes: usize, heads: usize, head_dim: usize },
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    SumAll { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list for one forward computation.
///
/// Leaf gradients persist across [`Tape::backward`] calls and accumulate
/// until [`Tape::zero_grad`] is called.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, detail: String) -> KernelError {
    KernelError::Dimension { op, detail }
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..numel {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tensor(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// `a · b` with `a` of shape `[.., m, k]` (leading dims flattened into
    /// rows) and a 2-D `b` of shape `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa.iter().product::<usize>() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Self::tensor(shape, out), Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let op = Op::BatchMatMul { a, b, batch, m, k, n, trans_b };
        Ok(self.push(Self::tensor(vec![batch, m, n], out), op, &[a, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>), KernelError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape =
            broadcast_shape(sa, sb).ok_or_else(|| dim_err(name, format!("{sa:?} vs {sb:?}")))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = (sa != out_shape.as_slice()).then(|| broadcast_map(sa, &out_shape));
            let mb = (sb != out_shape.as_slice()).then(|| broadcast_map(sb, &out_shape));
            let numel: usize = out_shape.iter().product();
            (0..numel)
                .map(|i| {
                    let x = av[ma.as_ref().map_or(i, |m| m[i])];
                    let y = bv[mb.as_ref().map_or(i, |m| m[i])];
                    f(x, y)
                })
                .collect()
        };
        Ok((out_shape, data))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (shape, data) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Self::tensor(shape, data), Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (shape, data) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Self::tensor(shape, data), Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (shape, data) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Self::tensor(shape, data), Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Shift { x }, &[x])
    }

    pub fn powf(&mut self, x: Var, p: T) -> Var {
        let value = self.value(x).map(|v| v.powf(p));
        self.push(value, Op::Pow { x, p }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp { x }, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.push(value, Op::Log { x }, &[x])
    }

    fn check_mask(&self, x: Var, mask: &Option<Vec<bool>>, name: &'static str) -> Result<usize, KernelError> {
        let shape = self.shape(x);
        let cols = *shape.last().unwrap();
        if let Some(m) = mask {
            if m.len() != self.value(x).numel() {
                return Err(dim_err(name, format!("mask of {} for shape {shape:?}", m.len())));
            }
        }
        Ok(cols)
    }

    /// Softmax along the last axis. Entries whose `mask` flag is `false`
    /// are excluded from normalization and come out as exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var, KernelError> {
        let cols = self.check_mask(x, &mask, "softmax_masked")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (r, (xrow, orow)) in xv.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let ok = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| ok(j))
                .map(|j| xrow[j])
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(KernelError::InfeasibleState)?;
            let mut sum = T::zero();
            for j in (0..cols).filter(|&j| ok(j)) {
                let e = (xrow[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for j in (0..cols).filter(|&j| ok(j)) {
                orow[j] /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::Softmax { x, mask, cols }, &[x]))
    }

    /// Log-softmax along the last axis; masked entries are `-inf`.
    pub fn log_softmax_masked(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var, KernelError> {
        let cols = self.check_mask(x, &mask, "log_softmax_masked")?;
        let xv = self.value(x).data();
        let mut out = vec![T::neg_infinity(); xv.len()];
        for (r, (xrow, orow)) in xv.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let ok = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| ok(j))
                .map(|j| xrow[j])
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(KernelError::InfeasibleState)?;
            let sum: T = (0..cols).filter(|&j| ok(j)).map(|j| (xrow[j] - max).exp()).sum();
            let lse = max + sum.ln();
            for j in (0..cols).filter(|&j| ok(j)) {
                orow[j] = xrow[j] - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::LogSoftmax { x, mask, cols }, &[x]))
    }

    /// Per-feature batch normalization of a `[rows, features]` input
    /// (leading dims are flattened into rows).
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<Normalized<T>, KernelError> {
        let shape = self.shape(x).to_vec();
        let f = *shape.last().unwrap();
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(dim_err(
                "batchnorm",
                format!("input {shape:?} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / f;
        let eps = T::of(BN_EPS);
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); f];
                for row in xv.chunks(f) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let rn = T::of(rows as f64);
                mean.iter_mut().for_each(|m| *m /= rn);
                let mut var = vec![T::zero(); f];
                for row in xv.chunks(f) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rn);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(dim_err("batchnorm", format!("running stats for {f} features")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ((xr, hr), or) in xv.chunks(f).zip(xhat.chunks_mut(f)).zip(out.chunks_mut(f)) {
            for j in 0..f {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = gv[j] * h + bv[j];
            }
        }
        let batch_moments = batch.then_some((mean, var));
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch };
        let out = self.push(Self::tensor(shape, out), op, &[x, gamma, beta]);
        Ok(Normalized { out, batch_moments })
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, KernelError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !agree {
                return Err(dim_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let lens: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        Ok(self.push(Self::tensor(shape, out), Op::Concat { parts: lens, outer, inner }, parts))
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, KernelError> {
        let width = *self.shape(x).last().unwrap();
        let rows = self.value(x).numel() / width;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dim_err("gather_rows", format!("row {bad} of {rows}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let op = Op::GatherRows { x, idx: idx.to_vec(), width };
        Ok(self.push(Self::tensor(vec![idx.len(), width], out), op, &[x]))
    }

    /// Picks `x[r, idx[r]]` for every row of `x` viewed as `[rows, cols]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var, KernelError> {
        let cols = *self.shape(x).last().unwrap();
        let rows = self.value(x).numel() / cols;
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(dim_err("gather_last", format!("{} indices for {rows}x{cols}", idx.len())));
        }
        let xv = self.value(x).data();
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &c)| xv[r * cols + c]).collect();
        let op = Op::GatherLast { x, idx: idx.to_vec(), cols };
        Ok(self.push(Self::tensor(vec![rows], out), op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// `[B, N, H·dh] -> [B·H, N, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, KernelError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(dim_err("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (batch, nodes, head_dim) = (s[0], s[1], s[2] / heads);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for n in 0..nodes {
                for h in 0..heads {
                    let src = ((b * nodes + n) * heads + h) * head_dim;
                    let dst = ((b * heads + h) * nodes + n) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xv[src..src + head_dim]);
                }
            }
        }
        let op = Op::SplitHeads { x, batch, nodes, heads, head_dim };
        Ok(self.push(Self::tensor(vec![batch * heads, nodes, head_dim], out), op, &[x]))
    }

    /// Sums out one axis (the axis is dropped from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, KernelError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(dim_err("sum_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(d, _)| d != axis).map(|(_, &v)| v).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Self::tensor(shape, out), Op::SumAxis { x, outer, len, inner }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, KernelError> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::of(len as f64)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), KernelError> {
        if self.value(loss).numel() != 1 {
            return Err(KernelError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        // adjoint buffer for `v`, created on first touch; None if `v` is constant
        fn slot<'a, T: Float>(
            adj: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
        }

        fn reduce_into<T: Float>(dst: &mut [T], g: &[T], src_shape: &[usize], out_shape: &[usize], scale: Option<&[T]>, neg: bool) {
            let sign = if neg { -T::one() } else { T::one() };
            if src_shape == out_shape {
                match scale {
                    Some(s) => dst.iter_mut().zip(g).zip(s).for_each(|((d, &gv), &sv)| *d += sign * gv * sv),
                    None => dst.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv),
                }
            } else {
                let map = broadcast_map(src_shape, out_shape);
                for (i, &m) in map.iter().enumerate() {
                    let v = scale.map_or(g[i], |s| g[i] * s[i]);
                    dst[m] += sign * v;
                }
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => {
                    let acc = grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if let Some(da) = slot(&mut adj, nodes, a) {
                        gemm(m, n, k, &g, false, nodes[b.0].value.data(), true, da, true);
                    }
                    if let Some(db) = slot(&mut adj, nodes, b) {
                        gemm(k, m, n, nodes[a.0].value.data(), true, &g, false, db, true);
                    }
                }
                &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(da) = slot(&mut adj, nodes, a) {
                        for t in 0..batch {
                            let gs = &g[t * m * n..(t + 1) * m * n];
                            let bs = &bv[t * k * n..(t + 1) * k * n];
                            let ds = &mut da[t * m * k..(t + 1) * m * k];
                            // trans_b: b is n×k and da = g·b; otherwise da = g·bᵀ
                            gemm(m, n, k, gs, false, bs, !trans_b, ds, true);
                        }
                    }
                    if let Some(db) = slot(&mut adj, nodes, b) {
                        for t in 0..batch {
                            let gs = &g[t * m * n..(t + 1) * m * n];
                            let as_ = &av[t * m * k..(t + 1) * m * k];
                            let ds = &mut db[t * k * n..(t + 1) * k * n];
                            if trans_b {
                                gemm(n, m, k, gs, true, as_, false, ds, true);
                            } else {
                                gemm(k, m, n, as_, true, gs, false, ds, true);
                            }
                        }
                    }
                }
                &Op::Add { a, b } | &Op::Sub { a, b } => {
                    let neg_b = matches!(node.op, Op::Sub { .. });
                    let sa = nodes[a.0].value.shape();
                    let sb = nodes[b.0].value.shape();
                    if let Some(da) = slot(&mut adj, nodes, a) {
                        reduce_into(da, &g, sa, out_shape, None, false);
                    }
                    if let Some(db) = slot(&mut adj, nodes, b) {
                        reduce_into(db, &g, sb, out_shape, None, neg_b);
                    }
                }
                &Op::Mul { a, b } => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let expand = |t: &Tensor<T>| -> Vec<T> {
                        if t.shape() == out_shape {
                            t.data().to_vec()
                        } else {
                            broadcast_map(t.shape(), out_shape).into_iter().map(|m| t.data()[m]).collect()
                        }
                    };
                    if nodes[a.0].requires_grad {
                        let other = expand(vb);
                        let da = slot(&mut adj, nodes, a).unwrap();
                        reduce_into(da, &g, va.shape(), out_shape, Some(&other), false);
                    }
                    if nodes[b.0].requires_grad {
                        let other = expand(va);
                        let db = slot(&mut adj, nodes, b).unwrap();
                        reduce_into(db, &g, vb.shape(), out_shape, Some(&other), false);
                    }
                }
                &Op::Scale { x, c } => {
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v * c);
                    }
                }
                &Op::Shift { x } | &Op::Reshape { x } => {
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                    }
                }
                &Op::Pow { x, p } => {
                    let xv = nodes[x.0].value.data();
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for ((d, &v), &xi) in dx.iter_mut().zip(&g).zip(xv) {
                            *d += v * p * xi.powf(p - T::one());
                        }
                    }
                }
                &Op::Tanh { x } => {
                    let y = node.value.data();
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for ((d, &v), &yi) in dx.iter_mut().zip(&g).zip(y) {
                            *d += v * (T::one() - yi * yi);
                        }
                    }
                }
                &Op::Relu { x } => {
                    let xv = nodes[x.0].value.data();
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for ((d, &v), &xi) in dx.iter_mut().zip(&g).zip(xv) {
                            if xi > T::zero() {
                                *d += v;
                            }
                        }
                    }
                }
                &Op::Exp { x } => {
                    let y = node.value.data();
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for ((d, &v), &yi) in dx.iter_mut().zip(&g).zip(y) {
                            *d += v * yi;
                        }
                    }
                }
                &Op::Log { x } => {
                    let xv = nodes[x.0].value.data();
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for ((d, &v), &xi) in dx.iter_mut().zip(&g).zip(xv) {
                            *d += v / xi;
                        }
                    }
                }
                Op::Softmax { x, mask, cols } => {
                    let (x, cols) = (*x, *cols);
                    let y = node.value.data();
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for r in 0..y.len() / cols {
                            let span = r * cols..(r + 1) * cols;
                            let ok = |j: usize| mask.as_ref().is_none_or(|m| m[span.start + j]);
                            let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                            let dot: T = (0..cols).filter(|&j| ok(j)).map(|j| yr[j] * gr[j]).sum();
                            let dr = &mut dx[span.clone()];
                            for j in (0..cols).filter(|&j| ok(j)) {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, mask, cols } => {
                    let (x, cols) = (*x, *cols);
                    let y = node.value.data();
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for r in 0..y.len() / cols {
                            let span = r * cols..(r + 1) * cols;
                            let ok = |j: usize| mask.as_ref().is_none_or(|m| m[span.start + j]);
                            let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                            let gsum: T = (0..cols).filter(|&j| ok(j)).map(|j| gr[j]).sum();
                            let dr = &mut dx[span.clone()];
                            for j in (0..cols).filter(|&j| ok(j)) {
                                dr[j] += gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let f = inv_std.len();
                    let rows = xhat.len() / f;
                    let gv = nodes[gamma.0].value.data();
                    let mut sum_g = vec![T::zero(); f];
                    let mut sum_gx = vec![T::zero(); f];
                    for (gr, hr) in g.chunks(f).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            sum_g[j] += gr[j];
                            sum_gx[j] += gr[j] * hr[j];
                        }
                    }
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        let rn = T::of(rows as f64);
                        for ((dr, gr), hr) in dx.chunks_mut(f).zip(g.chunks(f)).zip(xhat.chunks(f)) {
                            for j in 0..f {
                                let scale = gv[j] * inv_std[j];
                                if *batch {
                                    dr[j] += scale * (gr[j] - sum_g[j] / rn - hr[j] * sum_gx[j] / rn);
                                } else {
                                    dr[j] += scale * gr[j];
                                }
                            }
                        }
                    }
                    if let Some(dg) = slot(&mut adj, nodes, gamma) {
                        dg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                    }
                    if let Some(db) = slot(&mut adj, nodes, beta) {
                        db.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                    }
                }
                Op::Concat { parts, outer, inner } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, len) in parts {
                        if let Some(dp) = slot(&mut adj, nodes, p) {
                            for o in 0..*outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                for (d, &v) in dp[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                                    *d += v;
                                }
                            }
                        }
                        offset += len;
                    }
                }
                Op::GatherRows { x, idx, width } => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        for (r, &i) in idx.iter().enumerate() {
                            let src = &g[r * width..(r + 1) * width];
                            for (d, &v) in dx[i * width..(i + 1) * width].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::GatherLast { x, idx, cols } => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        for (r, &c) in idx.iter().enumerate() {
                            dx[r * cols + c] += g[r];
                        }
                    }
                }
                &Op::SplitHeads { x, batch, nodes: nn, heads, head_dim } => {
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for b in 0..batch {
                            for n in 0..nn {
                                for h in 0..heads {
                                    let src = ((b * heads + h) * nn + n) * head_dim;
                                    let dst = ((b * nn + n) * heads + h) * head_dim;
                                    for e in 0..head_dim {
                                        dx[dst + e] += g[src + e];
                                    }
                                }
                            }
                        }
                    }
                }
                &Op::SumAxis { x, outer, len, inner } => {
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        for o in 0..outer {
                            let gs = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let start = (o * len + l) * inner;
                                for (d, &v) in dx[start..start + inner].iter_mut().zip(gs) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                &Op::SumAll { x } => {
                    if let Some(dx) = slot(&mut adj, nodes, x) {
                        let v = g[0];
                        dx.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
        }
        Ok(())
    }
}
