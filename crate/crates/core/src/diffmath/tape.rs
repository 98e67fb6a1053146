//! Tensor-level reverse-mode tape.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis for [`Tape::mean_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Average across rows: `r x c -> 1 x c`.
    Rows,
    /// Average across columns: `r x c -> r x 1`.
    Cols,
}

const NO_WINNER: usize = usize::MAX;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddColumnBias { x: Var, bias: Var },
    Relu(Var),
    MeanPool(Var, Axis),
    Sum(Var),
    L2Norm(Var),
    ColumnNorms(Var),
    MaskedMaxPool { x: Var, winners: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    TempSoftmax { a: Var, tau: T },
    KlDivergence { p: Var, q: Var },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Gather { x: Var, index: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf, `None` if the loss does not depend
    /// on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Dimension { op, left, right }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Allows another `backward` call on this tape.
    pub fn reset_gradients(&mut self) {
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("div", a, b, |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    /// `y = x + bias * 1^T` for `x: r x n`, `bias: r x 1`.
    pub fn add_column_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.cols() != 1 || vb.rows() != vx.rows() {
            return Err(dim_err("add_column_bias", vx.shape(), vb.shape()));
        }
        let mut value = vx.clone();
        let cols = vx.cols();
        for (r, row) in value.data_mut().chunks_mut(cols.max(1)).enumerate() {
            let b = vb.data()[r];
            row.iter_mut().for_each(|y| *y += b);
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddColumnBias { x, bias }, ng))
    }

    /// Per-point affine map `y = W x + b` over a channel-major batch
    /// `x: in x N`, with `W: out x in` and `b: out x 1`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        self.add_column_bias(wx, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn mean_pool(&mut self, x: Var, axis: Axis) -> Var {
        let v = self.value(x);
        let (r, c) = v.shape();
        let value = match axis {
            Axis::Cols => {
                let inv = T::one() / T::lit(c as f64);
                Tensor::vector((0..r).map(|i| v.row(i).iter().copied().sum::<T>() * inv).collect())
            }
            Axis::Rows => {
                let inv = T::one() / T::lit(r as f64);
                let mut out = vec![T::zero(); c];
                for i in 0..r {
                    for (o, &y) in out.iter_mut().zip(v.row(i)) {
                        *o += y;
                    }
                }
                Tensor::from_vec(1, c, out.into_iter().map(|s| s * inv).collect())
                    .expect("shape")
            }
        };
        let ng = self.ng(x);
        self.push(value, Op::MeanPool(x, axis), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).frobenius_norm());
        let ng = self.ng(x);
        self.push(value, Op::L2Norm(x), ng)
    }

    /// Norm of every column: `r x c -> c x 1`.
    pub fn column_norms(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = v.shape();
        let mut acc = vec![T::zero(); c];
        for i in 0..r {
            for (a, &y) in acc.iter_mut().zip(v.row(i)) {
                *a += y * y;
            }
        }
        let value = Tensor::vector(acc.into_iter().map(T::sqrt).collect());
        let ng = self.ng(x);
        self.push(value, Op::ColumnNorms(x), ng)
    }

    /// Per-channel max over the members of each group.
    ///
    /// `x` is `channels x N`, `groups[i]` is the group of column `i`. The
    /// output is `channels x n_groups`; empty groups produce zero columns.
    /// Ties go to the lowest member index.
    pub fn masked_max_pool(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let v = self.value(x);
        let (channels, n) = v.shape();
        if groups.len() != n {
            return Err(dim_err("masked_max_pool", v.shape(), (groups.len(), 1)));
        }
        if let Some((i, &g)) = groups.iter().enumerate().find(|(_, &g)| g >= n_groups) {
            return Err(Error::Index(format!(
                "group id {g} of member {i} out of range [0, {n_groups})"
            )));
        }
        let mut out = vec![T::zero(); channels * n_groups];
        let mut winners = vec![NO_WINNER; channels * n_groups];
        for ch in 0..channels {
            let row = v.row(ch);
            let base = ch * n_groups;
            for (i, (&val, &g)) in row.iter().zip(groups).enumerate() {
                let slot = base + g;
                if winners[slot] == NO_WINNER || val > out[slot] {
                    out[slot] = val;
                    winners[slot] = i;
                }
            }
        }
        let value = Tensor::from_vec(channels, n_groups, out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MaskedMaxPool { x, winners }, ng))
    }

    /// `-log softmax(logits)[label]` with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits);
        let k = v.len();
        if label >= k {
            return Err(Error::Index(format!("label {label} out of range [0, {k})")));
        }
        let max = v.data().iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = v.data().iter().map(|&x| (x - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let loss = total.ln() - (v.data()[label] - max);
        let probs = exps.into_iter().map(|e| e / total).collect();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            ng,
        ))
    }

    /// `p_v = exp(relu(a_v)/tau) / sum_u exp(relu(a_u)/tau)`.
    pub fn temp_softmax(&mut self, a: Var, tau: T) -> Result<Var> {
        if !(tau > T::zero()) {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        let v = self.value(a);
        let scaled: Vec<T> = v.data().iter().map(|&x| x.max(T::zero()) / tau).collect();
        let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = scaled.iter().map(|&s| (s - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let value = Tensor::from_vec(v.rows(), v.cols(), exps.into_iter().map(|e| e / total).collect())?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::TempSoftmax { a, tau }, ng))
    }

    /// `sum_v p_v log(p_v / q_v)` with `0 log 0 = 0`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (vp, vq) = (self.value(p), self.value(q));
        if vp.shape() != vq.shape() {
            return Err(dim_err("kl_divergence", vp.shape(), vq.shape()));
        }
        let mut total = T::zero();
        for (i, (&pi, &qi)) in vp.data().iter().zip(vq.data()).enumerate() {
            if pi < T::zero() || qi < T::zero() {
                return Err(Error::Domain(format!(
                    "negative probability at entry {i}: p={pi}, q={qi}"
                )));
            }
            if pi > T::zero() {
                if qi == T::zero() {
                    return Err(Error::Domain(format!(
                        "q vanishes where p does not (entry {i})"
                    )));
                }
                total += pi * (pi / qi).ln();
            }
        }
        let ng = self.ng(p) || self.ng(q);
        Ok(self.push(Tensor::scalar(total), Op::KlDivergence { p, q }, ng))
    }

    /// Stack along rows; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(dim_err("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if start > end || end > v.rows() {
            return Err(Error::Index(format!(
                "row range {start}..{end} outside {} rows",
                v.rows()
            )));
        }
        let c = v.cols();
        let value = Tensor::from_vec(end - start, c, v.data()[start * c..end * c].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceRows { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return Err(dim_err("reshape", v.shape(), (rows, cols)));
        }
        let value = Tensor::from_vec(rows, cols, v.data().to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Picks entries by flat row-major index into a column vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return Err(Error::Index(format!("gather index {bad} outside {} entries", v.len())));
        }
        let value = Tensor::vector(index.iter().map(|&i| v.data()[i]).collect());
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// A second call without [`reset_gradients`](Self::reset_gradients) is an
    /// error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; reset gradients first".into(),
            ));
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {shape:?}"
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.ng(*a) {
                    // dA = G B^T
                    with_slot(grads, *a, m, k, |buf, acc| {
                        T::gemm(m, n, k, g.data(), false, vb.data(), true, buf, acc)
                    });
                }
                if self.ng(*b) {
                    // dB = A^T G
                    with_slot(grads, *b, k, n, |buf, acc| {
                        T::gemm(k, m, n, va.data(), true, g.data(), false, buf, acc)
                    });
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, zip(g, vb, |gi, y| gi * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, zip(g, va, |gi, x| gi * x));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, zip(g, vb, |gi, y| gi / y));
                }
                if self.ng(*b) {
                    let t = zip(va, vb, |x, y| -x / (y * y));
                    self.acc(grads, *b, zip(g, &t, |gi, d| gi * d));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::AddColumnBias { x, bias } => {
                if self.ng(*bias) {
                    let sums = (0..g.rows()).map(|r| g.row(r).iter().copied().sum()).collect();
                    self.acc(grads, *bias, Tensor::vector(sums));
                }
                self.acc(grads, *x, g.clone());
            }
            Op::Relu(a) => {
                let t = zip(g, val(*a), |gi, x| if x > T::zero() { gi } else { T::zero() });
                self.acc(grads, *a, t);
            }
            Op::MeanPool(x, axis) => {
                let (r, c) = val(*x).shape();
                let t = match axis {
                    Axis::Cols => {
                        let inv = T::one() / T::lit(c as f64);
                        Tensor::from_fn(r, c, |i, _| g.data()[i] * inv)
                    }
                    Axis::Rows => {
                        let inv = T::one() / T::lit(r as f64);
                        Tensor::from_fn(r, c, |_, j| g.data()[j] * inv)
                    }
                };
                self.acc(grads, *x, t);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                self.acc(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::L2Norm(x) => {
                let norm = out.item();
                let gi = g.item();
                let t = if norm > T::zero() {
                    val(*x).map(|v| gi * v / norm)
                } else {
                    let (r, c) = val(*x).shape();
                    Tensor::zeros(r, c)
                };
                self.acc(grads, *x, t);
            }
            Op::ColumnNorms(x) => {
                let vx = val(*x);
                let norms = out.data();
                let t = Tensor::from_fn(vx.rows(), vx.cols(), |r, c| {
                    if norms[c] > T::zero() {
                        g.data()[c] * vx.get(r, c) / norms[c]
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, t);
            }
            Op::MaskedMaxPool { x, winners } => {
                let (channels, n) = val(*x).shape();
                let n_groups = out.cols();
                let mut t = Tensor::zeros(channels, n);
                for ch in 0..channels {
                    for grp in 0..n_groups {
                        let w = winners[ch * n_groups + grp];
                        if w != NO_WINNER {
                            let cur = t.get(ch, w);
                            t.set(ch, w, cur + g.get(ch, grp));
                        }
                    }
                }
                self.acc(grads, *x, t);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let gi = g.item();
                let v = val(*logits);
                let mut d: Vec<T> = probs.iter().map(|&p| p * gi).collect();
                d[*label] -= gi;
                self.acc(grads, *logits, Tensor::from_vec(v.rows(), v.cols(), d).expect("shape"));
            }
            Op::TempSoftmax { a, tau } => {
                let p = out.data();
                let dot: T = p.iter().zip(g.data()).map(|(&pi, &gi)| pi * gi).sum();
                let va = val(*a);
                let d = p
                    .iter()
                    .zip(g.data())
                    .zip(va.data())
                    .map(|((&pi, &gi), &ai)| {
                        if ai > T::zero() {
                            pi * (gi - dot) / *tau
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(va.rows(), va.cols(), d).expect("shape"));
            }
            Op::KlDivergence { p, q } => {
                let gi = g.item();
                let (vp, vq) = (val(*p), val(*q));
                if self.ng(*p) {
                    let t = zip(vp, vq, |pi, qi| {
                        if pi > T::zero() {
                            gi * ((pi / qi).ln() + T::one())
                        } else {
                            T::zero()
                        }
                    });
                    self.acc(grads, *p, t);
                }
                if self.ng(*q) {
                    let t = zip(vp, vq, |pi, qi| if pi > T::zero() { -gi * pi / qi } else { T::zero() });
                    self.acc(grads, *q, t);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if self.ng(p) {
                        let data = g.data()[row * cols..(row + r) * cols].to_vec();
                        self.acc(grads, p, Tensor::from_vec(r, cols, data).expect("shape"));
                    }
                    row += r;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let c = vx.cols();
                let mut t = Tensor::zeros(vx.rows(), c);
                t.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, t);
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                self.acc(grads, *x, Tensor::from_vec(r, c, g.data().to_vec()).expect("shape"));
            }
            Op::Gather { x, index } => {
                let (r, c) = val(*x).shape();
                let mut t = Tensor::zeros(r, c);
                for (&i, &gi) in index.iter().zip(g.data()) {
                    t.data_mut()[i] += gi;
                }
                self.acc(grads, *x, t);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot => *slot = Some(delta),
        }
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn with_slot<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    rows: usize,
    cols: usize,
    f: impl FnOnce(&mut [T], bool),
) {
    match &mut grads[v.0] {
        Some(existing) => f(existing.data_mut(), true),
        slot => {
            let mut t = Tensor::zeros(rows, cols);
            f(t.data_mut(), false);
            *slot = Some(t);
        }
    }
}
