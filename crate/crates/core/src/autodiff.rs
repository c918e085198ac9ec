//! Dense reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every forward operation in creation order; [`Var`] is
//! a cheap handle into it. [`Tape::backward`] walks the record in exact
//! reverse order, accumulating gradients additively so a value consumed by
//! several operations receives the sum of their contributions. Scalars are
//! `1 x 1` matrices. A tape belongs to one worker and is used for one
//! backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, S::zero())
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Structural(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(v: S) -> Self {
        Self::filled(1, 1, v)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type, e.g. `f64` features into an `f32` model.
    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Structural(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out);
        Ok(out)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }
}

// out += a * b
fn gemm_nn<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, out: &mut Matrix<S>) {
    let m = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == S::zero() {
                continue;
            }
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

// out += a * b^T
fn gemm_nt<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, out: &mut Matrix<S>) {
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let dot: S = arow.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum();
            out.data[i * out.cols + j] = out.data[i * out.cols + j] + dot;
        }
    }
}

// out += a^T * b
fn gemm_tn<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, out: &mut Matrix<S>) {
    let m = b.cols;
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == S::zero() {
                continue;
            }
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Full,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, op: &str) -> Result<Broadcast> {
    match b.shape() {
        s if s == a.shape() => Ok(Broadcast::Full),
        (1, 1) => Ok(Broadcast::Scalar),
        (1, c) if c == a.cols => Ok(Broadcast::Row),
        (r, 1) if r == a.rows => Ok(Broadcast::Col),
        (r, c) => Err(Error::Structural(format!(
            "{op}: cannot broadcast {r}x{c} onto {}x{}",
            a.rows, a.cols
        ))),
    }
}

#[inline]
fn bidx(kind: Broadcast, cols: usize, i: usize) -> usize {
    match kind {
        Broadcast::Full => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, S),
    Concat(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, S),
    Gather(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>, usize),
    Dropout(Var, Vec<S>),
    SquaredEuclidean(Var, Var),
    CrossEntropy(Var, Vec<(usize, usize)>, Matrix<S>),
    Sum(Var),
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Operation record for one forward/backward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<S>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b, _)
            | Op::Mul(a, b, _)
            | Op::SquaredEuclidean(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Gather(a, _)
            | Op::SegmentSum(a, _)
            | Op::SegmentSoftmax(a, _, _)
            | Op::Dropout(a, _)
            | Op::CrossEntropy(a, _, _)
            | Op::Sum(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// `a + b`; `b` may be a `1 x cols` row, a `rows x 1` column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(av, bv, "add")?;
        let cols = av.cols;
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data[bidx(kind, cols, i)])
            .collect();
        let value = Matrix::from_vec(av.rows, av.cols, data)?;
        self.push(value, Op::Add(a, b, kind), "add")
    }

    /// Element-wise `a * b` with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(av, bv, "mul")?;
        let cols = av.cols;
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv.data[bidx(kind, cols, i)])
            .collect();
        let value = Matrix::from_vec(av.rows, av.cols, data)?;
        self.push(value, Op::Mul(a, b, kind), "mul")
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), "scale")
    }

    /// Concatenation along the last (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Structural("concat of nothing".into()));
        };
        let rows = self.value(*first).rows;
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows != rows) {
            return Err(Error::Structural(format!(
                "concat: {} rows vs {rows}",
                self.value(*bad).rows
            )));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                value.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(value, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(S::zero()));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { x * slope });
        self.push(value, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    /// Rows `index[i]` of `a`, stacked.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(bad) = index.iter().find(|&&i| i >= av.rows) {
            return Err(Error::Structural(format!("gather row {bad} of {}", av.rows)));
        }
        let mut value = Matrix::zeros(index.len(), av.cols);
        for (o, &i) in index.iter().enumerate() {
            value.row_mut(o).copy_from_slice(av.row(i));
        }
        self.push(value, Op::Gather(a, index.to_vec()), "gather_rows")
    }

    /// Sums rows of `a` into `n_segments` output rows; row `i` goes to `segments[i]`.
    pub fn segment_sum(&mut self, a: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let av = self.value(a);
        check_segments(av.rows, segments, n_segments)?;
        let mut value = Matrix::zeros(n_segments, av.cols);
        for (i, &s) in segments.iter().enumerate() {
            for (o, &x) in value.row_mut(s).iter_mut().zip(av.row(i)) {
                *o = *o + x;
            }
        }
        self.push(value, Op::SegmentSum(a, segments.to_vec()), "segment_sum")
    }

    /// Column-wise softmax within each segment of rows. Each column of each
    /// non-empty segment sums to one.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let av = self.value(a);
        check_segments(av.rows, segments, n_segments)?;
        let cols = av.cols;
        let mut max = Matrix::filled(n_segments, cols, S::neg_infinity());
        for (i, &s) in segments.iter().enumerate() {
            for (m, &x) in max.row_mut(s).iter_mut().zip(av.row(i)) {
                *m = m.max(x);
            }
        }
        let mut value = Matrix::zeros(av.rows, cols);
        let mut denom = Matrix::zeros(n_segments, cols);
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..cols {
                let e = (av.get(i, j) - max.get(s, j)).exp();
                value.set(i, j, e);
                denom.set(s, j, denom.get(s, j) + e);
            }
        }
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..cols {
                value.set(i, j, value.get(i, j) / denom.get(s, j));
            }
        }
        self.push(
            value,
            Op::SegmentSoftmax(a, segments.to_vec(), n_segments),
            "segment_softmax",
        )
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Outside
    /// training mode this is the identity and returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Input(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let n = self.value(a).data.len();
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let av = self.value(a);
        let data = av.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Matrix::from_vec(av.rows, av.cols, data)?;
        self.push(value, Op::Dropout(a, mask), "dropout")
    }

    /// Pairwise squared Euclidean distances between rows of `a` (`n x m`)
    /// and rows of `b` (`c x m`), giving `n x c`.
    pub fn squared_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.cols {
            return Err(Error::Structural(format!(
                "squared_euclidean: widths {} and {}",
                av.cols, bv.cols
            )));
        }
        let value = Matrix::from_fn(av.rows, bv.rows, |i, j| {
            av.row(i)
                .iter()
                .zip(bv.row(j))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum()
        });
        self.push(value, Op::SquaredEuclidean(a, b), "squared_euclidean")
    }

    /// Mean softmax cross-entropy over the listed `(row, target class)` pairs.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.is_empty() {
            return Err(Error::Input("cross_entropy over zero rows".into()));
        }
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= lv.rows || c >= lv.cols) {
            return Err(Error::Structural(format!(
                "cross_entropy target ({r}, {c}) outside {}x{} logits",
                lv.rows, lv.cols
            )));
        }
        let mut probs = Matrix::zeros(targets.len(), lv.cols);
        let mut loss = S::zero();
        for (t, &(r, c)) in targets.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - m).exp()).sum();
            let log_z = z.ln() + m;
            loss = loss + log_z - row[c];
            for (p, &x) in probs.row_mut(t).iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let n = S::of(targets.len() as f64);
        let value = Matrix::scalar(loss / n);
        self.push(value, Op::CrossEntropy(logits, targets.to_vec(), probs), "cross_entropy")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data.len();
        let s = self.sum(a)?;
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Same value, recorded as a fresh constant: no gradient flows back
    /// through the result.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Propagates `d loss / d v` to every recorded value. `loss` must be
    /// `1 x 1`; a tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::Structural("backward called twice on one tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Structural(format!("backward from non-scalar {r}x{c}")));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // only keep gradients of values that actually require them
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix<S>, grads: &mut [Option<Matrix<S>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let acc = slot(grads, *a, av.shape());
                    gemm_nt(g, bv, acc);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bv.shape());
                    gemm_tn(av, g, acc);
                }
            }
            Op::Add(a, b, kind) => {
                if wants(*a) {
                    let acc = slot(grads, *a, g.shape());
                    for (o, &x) in acc.data.iter_mut().zip(&g.data) {
                        *o = *o + x;
                    }
                }
                if wants(*b) {
                    let shape = nodes[b.0].value.shape();
                    let acc = slot(grads, *b, shape);
                    for (i, &x) in g.data.iter().enumerate() {
                        let j = bidx(*kind, g.cols, i);
                        acc.data[j] = acc.data[j] + x;
                    }
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let acc = slot(grads, *a, av.shape());
                    for (i, &x) in g.data.iter().enumerate() {
                        acc.data[i] = acc.data[i] + x * bv.data[bidx(*kind, g.cols, i)];
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bv.shape());
                    for (i, &x) in g.data.iter().enumerate() {
                        let j = bidx(*kind, g.cols, i);
                        acc.data[j] = acc.data[j] + x * av.data[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let acc = slot(grads, *a, g.shape());
                for (o, &x) in acc.data.iter_mut().zip(&g.data) {
                    *o = *o + x * *c;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols;
                    if wants(*p) {
                        let acc = slot(grads, *p, (g.rows, w));
                        for i in 0..g.rows {
                            for (o, &x) in acc.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                *o = *o + x;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                let acc = slot(grads, *a, av.shape());
                for ((o, &x), &v) in acc.data.iter_mut().zip(&g.data).zip(&av.data) {
                    if v > S::zero() {
                        *o = *o + x;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = &nodes[a.0].value;
                let acc = slot(grads, *a, av.shape());
                for ((o, &x), &v) in acc.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *o = *o + if v > S::zero() { x } else { x * *slope };
                }
            }
            Op::Gather(a, index) => {
                let shape = nodes[a.0].value.shape();
                let acc = slot(grads, *a, shape);
                for (r, &i) in index.iter().enumerate() {
                    for (o, &x) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + x;
                    }
                }
            }
            Op::SegmentSum(a, segments) => {
                let shape = nodes[a.0].value.shape();
                let acc = slot(grads, *a, shape);
                for (i, &s) in segments.iter().enumerate() {
                    for (o, &x) in acc.row_mut(i).iter_mut().zip(g.row(s)) {
                        *o = *o + x;
                    }
                }
            }
            Op::SegmentSoftmax(a, segments, n_segments) => {
                let y = &node.value;
                let mut dot = Matrix::<S>::zeros(*n_segments, y.cols);
                for (i, &s) in segments.iter().enumerate() {
                    for j in 0..y.cols {
                        dot.set(s, j, dot.get(s, j) + g.get(i, j) * y.get(i, j));
                    }
                }
                let acc = slot(grads, *a, y.shape());
                for (i, &s) in segments.iter().enumerate() {
                    for j in 0..y.cols {
                        let d = y.get(i, j) * (g.get(i, j) - dot.get(s, j));
                        acc.set(i, j, acc.get(i, j) + d);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let acc = slot(grads, *a, g.shape());
                for ((o, &x), &m) in acc.data.iter_mut().zip(&g.data).zip(mask) {
                    *o = *o + x * m;
                }
            }
            Op::SquaredEuclidean(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let two = S::of(2.0);
                if wants(*a) {
                    let acc = slot(grads, *a, av.shape());
                    for i in 0..av.rows {
                        for j in 0..bv.rows {
                            let gij = g.get(i, j) * two;
                            for k in 0..av.cols {
                                let d = av.get(i, k) - bv.get(j, k);
                                acc.set(i, k, acc.get(i, k) + gij * d);
                            }
                        }
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bv.shape());
                    for i in 0..av.rows {
                        for j in 0..bv.rows {
                            let gij = g.get(i, j) * two;
                            for k in 0..av.cols {
                                let d = bv.get(j, k) - av.get(i, k);
                                acc.set(j, k, acc.get(j, k) + gij * d);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy(a, targets, probs) => {
                let shape = nodes[a.0].value.shape();
                let scale = g.data[0] / S::of(targets.len() as f64);
                let acc = slot(grads, *a, shape);
                for (t, &(r, c)) in targets.iter().enumerate() {
                    for (j, &p) in probs.row(t).iter().enumerate() {
                        let onehot = if j == c { S::one() } else { S::zero() };
                        acc.set(r, j, acc.get(r, j) + scale * (p - onehot));
                    }
                }
            }
            Op::Sum(a) => {
                let shape = nodes[a.0].value.shape();
                let acc = slot(grads, *a, shape);
                for o in acc.data.iter_mut() {
                    *o = *o + g.data[0];
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Matrix<S>>], v: Var, shape: (usize, usize)) -> &mut Matrix<S> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn check_segments(rows: usize, segments: &[usize], n_segments: usize) -> Result<()> {
    if segments.len() != rows {
        return Err(Error::Structural(format!(
            "{} segment ids for {rows} rows",
            segments.len()
        )));
    }
    if let Some(bad) = segments.iter().find(|&&s| s >= n_segments) {
        return Err(Error::Structural(format!("segment id {bad} >= {n_segments}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn segment_softmax_singleton_and_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(m(4, 1, &[3.7, 0.0, 0.0, 0.0]));
        let y = t.segment_softmax(x, &[0, 1, 1, 1], 2).unwrap();
        let v = t.value(y).data();
        assert_eq!(v[0], 1.0);
        for &p in &v[1..] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_of_flat_logits_is_ln2() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(m(1, 2, &[0.0, 0.0]));
        let l = t.cross_entropy(x, &[(0, 0)]).unwrap();
        assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn linear_map_gradient_is_broadcast_input() {
        let mut t = Tape::<f64>::new();
        let w = t.param(m(2, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let x = t.constant(m(3, 1, &[1.0, 2.0, 3.0]));
        let y = t.matmul(w, x).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn relu_dead_unit_has_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(m(1, 2, &[-1.5, 2.0]));
        let y = t.relu(x).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        // l = sum(x * x) + sum(x) -> dl/dx = 2x + 1
        let mut t = Tape::<f64>::new();
        let x = t.param(m(1, 3, &[1.0, -2.0, 0.5]));
        let sq = t.mul(x, x).unwrap();
        let a = t.sum(sq).unwrap();
        let b = t.sum(x).unwrap();
        let l = t.add(a, b).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn second_backward_and_non_scalar_are_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.param(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Structural(_))));
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::Structural(_))));
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Structural(_))));
        let c = t.constant(Matrix::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(Error::Structural(_))));
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(m(1, 1, &[f64::MAX]));
        assert!(matches!(t.scale(a, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn stop_gradient_severs_flow() {
        let mut t = Tape::<f64>::new();
        let x = t.param(m(1, 1, &[2.0]));
        let y = t.scale(x, 3.0).unwrap();
        let z = t.stop_gradient(y);
        assert_eq!(t.value(z), t.value(y));
        let w = t.mul(z, x).unwrap();
        let l = t.sum(w).unwrap();
        let g = t.backward(l).unwrap();
        // only the direct path: d(6 * x)/dx with 6 frozen
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn dropout_eval_identity_and_train_scaling() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Matrix::filled(200, 50, 1.0));
        let mut r = rng::stream(1, 0);
        assert_eq!(t.dropout(x, 0.5, false, &mut r).unwrap(), x);
        let y = t.dropout(x, 0.5, true, &mut r).unwrap();
        let v = t.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || e == 2.0));
        let mean = v.sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }
}
