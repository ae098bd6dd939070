//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in creation order,
//! which is also a valid topological order, so the backward sweep is a single
//! reverse pass over the tape. A graph built with [`Graph::inference`] keeps
//! values but drops the bookkeeping needed for backward.

use std::cell::RefCell;
use std::sync::Arc;

use super::error::{shape_err, NumericsError, Result};
use super::float::Float;
use super::params::{Gradients, Parameter};
use super::tensor::{gemm, softmax_rows_inplace, Tensor};

type TensorPair<T> = (Arc<Tensor<T>>, Arc<Tensor<T>>);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys each query row may attend to.
///
/// Queries are the `n` newest rows; keys are `m >= n` rows whose first
/// `m - n` entries are a cached prefix that every query can see.
#[derive(Debug, Clone)]
pub enum AttnMask {
    /// Query `i` sees the prefix and new keys `0..=i`.
    Causal,
    /// Every query sees every key.
    Full,
    /// Rows are grouped in consecutive blocks of the given size; attention is
    /// full inside a block and absent across blocks. Requires `m == n`.
    Block(usize),
    /// Row-major `n x n` boolean matrix over the new keys; the prefix is always visible.
    Tree(Arc<Vec<bool>>),
}

impl AttnMask {
    fn range(&self, i: usize, n: usize, m: usize) -> (usize, usize) {
        let offset = m - n;
        match self {
            AttnMask::Causal => (0, offset + i + 1),
            AttnMask::Full | AttnMask::Tree(_) => (0, m),
            AttnMask::Block(b) => {
                let lo = b * (i / b);
                (lo, lo + b)
            }
        }
    }

    #[inline]
    fn allows(&self, i: usize, j: usize, n: usize, m: usize) -> bool {
        match self {
            AttnMask::Tree(mask) => {
                let offset = m - n;
                j < offset || mask[i * n + (j - offset)]
            }
            _ => true,
        }
    }
}

type CustomBackward<T> = Box<dyn Fn(&[Arc<Tensor<T>>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Op<T: Float> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        probs: Vec<T>,
    },
    CrossEntropyHard {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    CrossEntropySoft {
        logits: Var,
        targets: Arc<Tensor<T>>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Float> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param_uid: Option<u64>,
}

pub struct Graph<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    /// A graph that records backward information.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph for forward-only evaluation.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var], op_name: &'static str) -> Result<Var> {
        let value = value.check_finite(op_name)?;
        let requires_grad = self.record && inputs.iter().any(|&i| self.requires_grad(i));
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param_uid: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Leaf value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param_uid: None,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf bound to a parameter. Frozen parameters become constants.
    pub fn param(&self, p: &Parameter<T>) -> Var {
        let requires_grad = self.record && p.requires_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: p.shared_value(),
            op: Op::Leaf,
            requires_grad,
            param_uid: requires_grad.then(|| p.uid()),
        });
        Var(nodes.len() - 1)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv)?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<TensorPair<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok((av, bv))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape("add", a, b)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        self.push(Tensor::new(av.shape().to_vec(), data)?, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape("mul", a, b)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        self.push(Tensor::new(av.shape().to_vec(), data)?, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a `[c]` vector to every row of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = (*xv).clone();
        let c = xv.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += *b;
            }
        }
        self.push(out, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| *v * s).collect();
        self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::Scale(x, s), &[x], "scale")
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::Silu(x), &[x], "silu")
    }

    /// Root-mean-square normalization of each row, scaled by a learned `[c]` gain.
    pub fn rms_norm(&self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let c = xv.cols();
        if gv.len() != c {
            return Err(shape_err("rms_norm", format!("{:?} gain {:?}", xv.shape(), gv.shape())));
        }
        let mut out = (*xv).clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let cf = T::lit(c as f64);
        for row in out.data_mut().chunks_mut(c) {
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / cf;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for (o, g) in row.iter_mut().zip(gv.data()) {
                *o = *o * r * *g;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain], "rms_norm")
    }

    /// `[n, p]` and `[n, q]` side by side into `[n, p + q]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", format!("{:?} | {:?}", av.shape(), bv.shape())));
        }
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        self.push(Tensor::new(vec![n, p + q], data)?, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    /// Stacks `[n1, c]` on top of `[n2, c]`.
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("concat_rows", format!("{:?} / {:?}", av.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let shape = vec![av.rows() + bv.rows(), av.cols()];
        self.push(Tensor::new(shape, data)?, Op::ConcatRows(a, b), &[a, b], "concat_rows")
    }

    /// Rows of a `[r, c]` matrix picked by index (embedding lookup, reordering).
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumericsError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.push(out, Op::GatherRows(x, idx.to_vec()), &[x], "gather_rows")
    }

    /// Flat elements picked by index, as a `[len]` vector.
    pub fn select(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(shape_err("select", "empty index list"));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            let v = *xv.data().get(i).ok_or(NumericsError::Index {
                op: "select",
                index: i,
                extent: xv.len(),
            })?;
            data.push(v);
        }
        self.push(Tensor::vector(data)?, Op::Select(x, idx.to_vec()), &[x], "select")
    }

    /// The `k` largest entries of `x`, descending.
    pub fn topk_values(&self, x: Var, k: usize) -> Result<Var> {
        let idx: Vec<usize> = self.value(x).topk(k).into_iter().map(|(i, _)| i).collect();
        self.select(x, &idx)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = (*xv).clone();
        let c = out.cols();
        softmax_rows_inplace(out.data_mut(), c);
        self.push(out, Op::SoftmaxRows(x), &[x], "softmax")
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::lit(xv.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[n, d]`, `k` and `v` are `[m, d]` with `m >= n`; heads split `d` evenly.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d, m) = (qv.rows(), qv.cols(), kv.rows());
        if kv.cols() != d || vv.cols() != d || vv.rows() != m || m < n || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?} heads {heads}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        match &mask {
            AttnMask::Block(b) if *b == 0 || m != n || n % b != 0 => {
                return Err(shape_err("attention", format!("block {b} over {n} rows")))
            }
            AttnMask::Tree(t) if t.len() != n * n => {
                return Err(shape_err("attention", format!("tree mask {} for {n} rows", t.len())))
            }
            _ => {}
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = vec![T::zero(); n * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let (lo, hi) = mask.range(i, n, m);
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let qi = &qd[i * d + c0..i * d + c0 + dh];
                let mut max = T::neg_infinity();
                for j in lo..hi {
                    if !mask.allows(i, j, n, m) {
                        continue;
                    }
                    let kj = &kd[j * d + c0..j * d + c0 + dh];
                    let s = dot(qi, kj) * scale;
                    p[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = T::zero();
                for j in lo..hi {
                    if mask.allows(i, j, n, m) {
                        let e = (p[j] - max).exp();
                        p[j] = e;
                        sum += e;
                    }
                }
                let inv = T::one() / sum;
                let oi = &mut out[i * d + c0..i * d + c0 + dh];
                for j in lo..hi {
                    if !mask.allows(i, j, n, m) {
                        continue;
                    }
                    p[j] *= inv;
                    let pj = p[j];
                    let vj = &vd[j * d + c0..j * d + c0 + dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += pj * *x;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let keep = if self.record { probs } else { Vec::new() };
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs: keep,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Mean over rows of `-log softmax(logits_i)[target_i]`.
    pub fn cross_entropy_hard(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(shape_err("cross_entropy", format!("{r} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::Index {
                op: "cross_entropy",
                index: bad,
                extent: c,
            });
        }
        let mut probs = lv.data().to_vec();
        softmax_rows_inplace(&mut probs, c);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            loss -= log_softmax_at(lv.row(i), t);
        }
        loss /= T::lit(r as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyHard {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Mean over rows of `-sum_j p_ij log softmax(logits_i)_j` for fixed target distributions.
    pub fn cross_entropy_soft(&self, logits: Var, targets: Arc<Tensor<T>>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(shape_err(
                "cross_entropy",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        let (r, c) = (lv.rows(), lv.cols());
        for i in 0..r {
            let s: f64 = targets.row(i).iter().map(|x| x.as_f64()).sum();
            if (s - 1.0).abs() > 1e-6_f64.max(c as f64 * T::epsilon().as_f64()) {
                return Err(NumericsError::NotNormalized { sum: s });
            }
        }
        let mut probs = lv.data().to_vec();
        softmax_rows_inplace(&mut probs, c);
        let mut loss = T::zero();
        for i in 0..r {
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            for (x, p) in row.iter().zip(targets.row(i)) {
                if *p != T::zero() {
                    loss -= *p * (*x - lse);
                }
            }
        }
        loss /= T::lit(r as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySoft {
                logits,
                targets,
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Op with a caller-supplied forward value and backward rule.
    ///
    /// `backward` receives the input values and the output gradient and returns
    /// one optional gradient per input.
    pub fn custom(
        &self,
        inputs: &[Var],
        output: Tensor<T>,
        backward: impl Fn(&[Arc<Tensor<T>>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            inputs,
            "custom",
        )
    }

    /// Gradients of a scalar `loss` with respect to every parameter leaf reachable from it.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(gi) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(uid) = node.param_uid {
                let g = Tensor::new(node.value.shape().to_vec(), gi)?;
                let mut single = Gradients::default();
                single.by_uid.insert(uid, g);
                out.merge(single);
                continue;
            }
            let mut acc = Acc {
                nodes: &nodes,
                grads: &mut grads,
            };
            backward_op(&node.op, &node.value, &gi, &mut acc)?;
        }
        Ok(out)
    }
}

struct Acc<'a, T: Float> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Vec<T>>>,
}

impl<'a, T: Float> Acc<'a, T> {
    fn val(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer for `v`, or `None` if `v` needs no gradient.
    fn buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

fn backward_op<T: Float>(op: &Op<T>, out: &Tensor<T>, g: &[T], acc: &mut Acc<'_, T>) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (acc.val(*a), acc.val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = acc.buf(*a) {
                // dA = dC @ B^T
                gemm(m, n, k, T::one(), (g, n as isize, 1), (bv.data(), 1, n as isize), T::one(), ga);
            }
            if let Some(gb) = acc.buf(*b) {
                // dB = A^T @ dC
                gemm(k, m, n, T::one(), (av.data(), 1, k as isize), (g, n as isize, 1), T::one(), gb);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = acc.buf(*v) {
                    add_into(gv, g);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (acc.val(*a), acc.val(*b));
            if let Some(ga) = acc.buf(*a) {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *o += *x * *y;
                }
            }
            if let Some(gb) = acc.buf(*b) {
                for ((o, x), y) in gb.iter_mut().zip(g).zip(av.data()) {
                    *o += *x * *y;
                }
            }
        }
        Op::AddBias(x, b) => {
            let c = out.cols();
            if let Some(gx) = acc.buf(*x) {
                add_into(gx, g);
            }
            if let Some(gb) = acc.buf(*b) {
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc.buf(*x) {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += *v * *s;
                }
            }
        }
        Op::Silu(x) => {
            let xv = acc.val(*x);
            if let Some(gx) = acc.buf(*x) {
                for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(xv.data()) {
                    let s = sigmoid(xv);
                    *o += *gv * s * (T::one() + xv * (T::one() - s));
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (xv, gv) = (acc.val(*x), acc.val(*gain));
            let c = xv.cols();
            let cf = T::lit(c as f64);
            if let Some(gg) = acc.buf(*gain) {
                for (r, (row, grow)) in xv.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    for j in 0..c {
                        gg[j] += grow[j] * row[j] * inv_rms[r];
                    }
                }
            }
            if let Some(gx) = acc.buf(*x) {
                for (r, (row, grow)) in xv.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let ir = inv_rms[r];
                    let mut dot_sum = T::zero();
                    for j in 0..c {
                        dot_sum += grow[j] * gv.data()[j] * row[j] * ir;
                    }
                    let mean = dot_sum / cf;
                    let dst = &mut gx[r * c..(r + 1) * c];
                    for j in 0..c {
                        let dxhat = grow[j] * gv.data()[j];
                        let xhat = row[j] * ir;
                        dst[j] += ir * (dxhat - xhat * mean);
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let p = acc.val(*a).cols();
            let q = acc.val(*b).cols();
            let w = p + q;
            if let Some(ga) = acc.buf(*a) {
                for (dst, src) in ga.chunks_mut(p).zip(g.chunks(w)) {
                    add_into(dst, &src[..p]);
                }
            }
            if let Some(gb) = acc.buf(*b) {
                for (dst, src) in gb.chunks_mut(q).zip(g.chunks(w)) {
                    add_into(dst, &src[p..]);
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let split = acc.val(*a).len();
            if let Some(ga) = acc.buf(*a) {
                add_into(ga, &g[..split]);
            }
            if let Some(gb) = acc.buf(*b) {
                add_into(gb, &g[split..]);
            }
        }
        Op::GatherRows(x, idx) => {
            let c = out.cols();
            if let Some(gx) = acc.buf(*x) {
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
        }
        Op::Select(x, idx) => {
            if let Some(gx) = acc.buf(*x) {
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let c = out.cols();
            if let Some(gx) = acc.buf(*x) {
                for ((dst, y), gy) in gx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let s: T = y.iter().zip(gy).map(|(a, b)| *a * *b).sum();
                    for j in 0..c {
                        dst[j] += y[j] * (gy[j] - s);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            mask,
            probs,
        } => {
            let (qv, kv, vv) = (acc.val(*q), acc.val(*k), acc.val(*v));
            let (n, d, m) = (qv.rows(), qv.cols(), kv.rows());
            let dh = d / heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); m * d];
            let mut dv = vec![T::zero(); m * d];
            let mut dp = vec![T::zero(); m];
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            for h in 0..*heads {
                let c0 = h * dh;
                for i in 0..n {
                    let (lo, hi) = mask.range(i, n, m);
                    let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                    let gi = &g[i * d + c0..i * d + c0 + dh];
                    let mut weighted = T::zero();
                    for j in lo..hi {
                        if !mask.allows(i, j, n, m) {
                            continue;
                        }
                        let vj = &vd[j * d + c0..j * d + c0 + dh];
                        dp[j] = dot(gi, vj);
                        weighted += p[j] * dp[j];
                        let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                        for (o, x) in dvj.iter_mut().zip(gi) {
                            *o += p[j] * *x;
                        }
                    }
                    let qi = &qd[i * d + c0..i * d + c0 + dh];
                    for j in lo..hi {
                        if !mask.allows(i, j, n, m) {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        let kj = &kd[j * d + c0..j * d + c0 + dh];
                        let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += ds * *x;
                        }
                        let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                        for (o, x) in dkj.iter_mut().zip(qi) {
                            *o += ds * *x;
                        }
                    }
                }
            }
            for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
                if let Some(buf) = acc.buf(*var) {
                    add_into(buf, &grad);
                }
            }
        }
        Op::CrossEntropyHard {
            logits,
            targets,
            probs,
        } => {
            let c = acc.val(*logits).cols();
            let scale = g[0] / T::lit(targets.len() as f64);
            if let Some(gl) = acc.buf(*logits) {
                for (i, &t) in targets.iter().enumerate() {
                    let row = &mut gl[i * c..(i + 1) * c];
                    for j in 0..c {
                        row[j] += probs[i * c + j] * scale;
                    }
                    row[t] -= scale;
                }
            }
        }
        Op::CrossEntropySoft {
            logits,
            targets,
            probs,
        } => {
            let c = targets.cols();
            let r = targets.rows();
            let scale = g[0] / T::lit(r as f64);
            if let Some(gl) = acc.buf(*logits) {
                for i in 0..r {
                    let t = targets.row(i);
                    let mass: T = t.iter().copied().sum();
                    for j in 0..c {
                        gl[i * c + j] += (probs[i * c + j] * mass - t[j]) * scale;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc.buf(*x) {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc.buf(*x) {
                let s = g[0] / T::lit(gx.len() as f64);
                for o in gx.iter_mut() {
                    *o += s;
                }
            }
        }
        Op::Custom { inputs, backward } => {
            let vals: Vec<Arc<Tensor<T>>> = inputs.iter().map(|v| Arc::clone(&acc.nodes[v.0].value)).collect();
            let gout = Tensor::new(out.shape().to_vec(), g.to_vec())?;
            let grads = backward(&vals, &gout);
            for (v, gv) in inputs.iter().zip(grads) {
                if let (Some(gv), Some(buf)) = (gv, acc.buf(*v)) {
                    if gv.len() != buf.len() {
                        return Err(shape_err("custom", "backward returned wrong shape"));
                    }
                    add_into(buf, gv.data());
                }
            }
        }
    }
    Ok(())
}

#[inline]
fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|x| (*x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn log_softmax_at<T: Float>(row: &[T], index: usize) -> T {
    row[index] - log_sum_exp(row)
}
