//! Computation tape: dense f64 tensors plus recorded operations for a
//! single reverse pass.
//!
//! A [`Tape`] is an append-only arena. Every operation pushes one node
//! holding the forward value; [`Tape::backward`] walks the arena in
//! reverse creation order (which is a topological order by construction)
//! and accumulates gradients into the originating [`ParameterStore`].
//! Tapes are cheap to create and are meant to live for one batch.

use crate::params::{ParamId, ParameterStore};
use thiserror::Error;

/// Tensor shape. Scalars are rank 0 with one element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix { rows: usize, cols: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => *n,
            Shape::Matrix { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![*n],
            Shape::Matrix { rows, cols } => vec![*rows, *cols],
        }
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: value count {got} does not match shape ({want})")]
    ValueCount { op: &'static str, got: usize, want: usize },
    #[error("backward requires a scalar loss, got {0:?}")]
    NonScalarLoss(Shape),
    #[error("backward already ran on this tape")]
    BackwardAlreadyRan,
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    Add(TensorId, TensorId),
    AddN(Vec<TensorId>),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    MatVec(TensorId, TensorId),
    MatMulT(TensorId, TensorId),
    StackRows(Vec<TensorId>),
    Concat(Vec<TensorId>),
    Slice { input: TensorId, start: usize },
    Sigmoid(TensorId),
    Tanh(TensorId),
    Cos(TensorId),
    Softmax(TensorId),
    SoftmaxCols(TensorId),
    HeadScores { keys: TensorId, query: TensorId, n_heads: usize },
    HeadMix { weights: TensorId, values: TensorId, n_heads: usize },
    Dot(TensorId, TensorId),
    CosineSim(TensorId, TensorId),
    LogSigmoid(TensorId),
    LogSumExp(TensorId),
    Sum(TensorId),
}

/// Denominator guard for cosine similarity; a product of norms at or
/// below this yields similarity 0 with zero gradient.
pub const COSINE_EPS: f64 = 1e-12;

/// Append-only operation record with one value buffer per node and a
/// gradient slot allocated lazily during the reverse pass.
pub struct Tape {
    shapes: Vec<Shape>,
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    backward_ran: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            backward_ran: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, t: TensorId) -> &Shape {
        &self.shapes[t.0]
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.values[t.0]
    }

    pub fn scalar_value(&self, t: TensorId) -> f64 {
        debug_assert_eq!(self.values[t.0].len(), 1);
        self.values[t.0][0]
    }

    /// Gradient from the last backward pass, if one ran and reached `t`.
    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        let g = &self.grads[t.0];
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    fn push(&mut self, shape: Shape, values: Vec<f64>, op: Op) -> Result<TensorId> {
        debug_assert_eq!(shape.len(), values.len());
        #[cfg(debug_assertions)]
        {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: op_name(&op) });
            }
        }
        self.shapes.push(shape);
        self.values.push(values);
        self.grads.push(Vec::new());
        self.ops.push(op);
        Ok(TensorId(self.ops.len() - 1))
    }

    // ------------------------------------------------------------------
    // Leaves
    // ------------------------------------------------------------------

    pub fn constant(&mut self, shape: Shape, values: Vec<f64>) -> Result<TensorId> {
        if shape.len() != values.len() {
            return Err(TensorError::ValueCount {
                op: "constant",
                got: values.len(),
                want: shape.len(),
            });
        }
        self.push(shape, values, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Shape::Scalar, vec![v], Op::Const).expect("scalar constant")
    }

    pub fn vector(&mut self, vals: &[f64]) -> TensorId {
        self.push(Shape::Vector(vals.len()), vals.to_vec(), Op::Const).expect("vector constant")
    }

    /// Leaf backed by a store parameter; gradients accumulate into the
    /// store during [`Tape::backward`].
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> TensorId {
        let p = store.param(id);
        self.push(p.shape.clone(), p.values.clone(), Op::Param(id)).expect("param leaf")
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn check_same(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("add", a, b)?;
        let vals: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shapes[a.0].clone(), vals, Op::Add(a, b))
    }

    pub fn add_n(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::EmptyInput { op: "add_n" });
        };
        for &t in &inputs[1..] {
            self.check_same("add_n", first, t)?;
        }
        let mut vals = self.value(first).to_vec();
        for &t in &inputs[1..] {
            for (o, v) in vals.iter_mut().zip(self.value(t)) {
                *o += v;
            }
        }
        self.push(self.shapes[first.0].clone(), vals, Op::AddN(inputs.to_vec()))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("sub", a, b)?;
        let vals: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(self.shapes[a.0].clone(), vals, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("mul", a, b)?;
        let vals: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(self.shapes[a.0].clone(), vals, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shapes[a.0].clone(), vals, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        self.push(self.shapes[a.0].clone(), vals, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    pub fn matvec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = match *self.shape(m) {
            Shape::Matrix { rows, cols } => (rows, cols),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "matvec",
                    detail: format!("left operand must be a matrix, got {s:?}"),
                })
            }
        };
        if self.shape(v).len() != cols || matches!(self.shape(v), Shape::Matrix { .. }) {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                detail: format!("matrix is {rows}x{cols}, vector is {:?}", self.shape(v)),
            });
        }
        let mv = self.value(m);
        let vv = self.value(v);
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &mv[r * cols..(r + 1) * cols];
            *o = row.iter().zip(vv).map(|(a, b)| a * b).sum();
        }
        self.push(Shape::Vector(rows), out, Op::MatVec(m, v))
    }

    /// `x · wᵀ` where `x` is n×k and `w` is m×k; result n×m. Used to
    /// project a stack of feature rows through a weight matrix.
    pub fn matmul_t(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (n, k) = match *self.shape(x) {
            Shape::Matrix { rows, cols } => (rows, cols),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul_t",
                    detail: format!("left operand must be a matrix, got {s:?}"),
                })
            }
        };
        let (m, k2) = match *self.shape(w) {
            Shape::Matrix { rows, cols } => (rows, cols),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul_t",
                    detail: format!("right operand must be a matrix, got {s:?}"),
                })
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                detail: format!("inner dims differ: {n}x{k} vs {m}x{k2}"),
            });
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xrow = &xv[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (j, o) in orow.iter_mut().enumerate() {
                let wrow = &wv[j * k..(j + 1) * k];
                *o = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            }
        }
        self.push(Shape::Matrix { rows: n, cols: m }, out, Op::MatMulT(x, w))
    }

    /// Stack equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        let Some(&first) = rows.first() else {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        };
        let cols = self.shape(first).len();
        let mut vals = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if self.shape(r).len() != cols || matches!(self.shape(r), Shape::Matrix { .. }) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("expected vectors of length {cols}, got {:?}", self.shape(r)),
                });
            }
            vals.extend_from_slice(self.value(r));
        }
        self.push(Shape::Matrix { rows: rows.len(), cols }, vals, Op::StackRows(rows.to_vec()))
    }

    /// Concatenate scalars/vectors into one vector.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let mut vals = Vec::new();
        for &p in parts {
            if matches!(self.shape(p), Shape::Matrix { .. }) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: "matrix operand not supported".into(),
                });
            }
            vals.extend_from_slice(self.value(p));
        }
        self.push(Shape::Vector(vals.len()), vals, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, v: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let n = self.shape(v).len();
        if matches!(self.shape(v), Shape::Matrix { .. }) || start + len > n {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("slice {start}..{} of {:?}", start + len, self.shape(v)),
            });
        }
        let vals = self.value(v)[start..start + len].to_vec();
        self.push(Shape::Vector(len), vals, Op::Slice { input: v, start })
    }

    // ------------------------------------------------------------------
    // Nonlinearities
    // ------------------------------------------------------------------

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shapes[a.0].clone(), vals, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(self.shapes[a.0].clone(), vals, Op::Tanh(a))
    }

    pub fn cos(&mut self, a: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x.cos()).collect();
        self.push(self.shapes[a.0].clone(), vals, Op::Cos(a))
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        if matches!(self.shape(a), Shape::Matrix { .. }) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                detail: "expected a vector".into(),
            });
        }
        let vals = softmax_slice(self.value(a));
        self.push(self.shapes[a.0].clone(), vals, Op::Softmax(a))
    }

    /// Column-wise max-subtracted softmax over a matrix.
    pub fn softmax_cols(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = match *self.shape(a) {
            Shape::Matrix { rows, cols } => (rows, cols),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cols",
                    detail: format!("expected a matrix, got {s:?}"),
                })
            }
        };
        let av = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| av[r * cols + c]).collect();
            let sm = softmax_slice(&col);
            for r in 0..rows {
                out[r * cols + c] = sm[r];
            }
        }
        self.push(Shape::Matrix { rows, cols }, out, Op::SoftmaxCols(a))
    }

    // ------------------------------------------------------------------
    // Attention primitives
    // ------------------------------------------------------------------

    /// Per-head scaled dot products between a query and stacked keys.
    ///
    /// `keys` is n×d, `query` has length d, d divisible by `n_heads`;
    /// output is n×n_heads with entry `(j, h) = qₕ·kⱼₕ / sqrt(d/n_heads)`.
    pub fn head_scores(
        &mut self,
        keys: TensorId,
        query: TensorId,
        n_heads: usize,
    ) -> Result<TensorId> {
        let (n, d) = match *self.shape(keys) {
            Shape::Matrix { rows, cols } => (rows, cols),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "head_scores",
                    detail: format!("keys must be a matrix, got {s:?}"),
                })
            }
        };
        if self.shape(query).len() != d || n_heads == 0 || d % n_heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "head_scores",
                detail: format!("keys {n}x{d}, query {:?}, heads {n_heads}", self.shape(query)),
            });
        }
        let dh = d / n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let kv = self.value(keys);
        let qv = self.value(query);
        let mut out = vec![0.0; n * n_heads];
        for j in 0..n {
            let krow = &kv[j * d..(j + 1) * d];
            for h in 0..n_heads {
                let s: f64 = (h * dh..(h + 1) * dh).map(|c| krow[c] * qv[c]).sum();
                out[j * n_heads + h] = s * inv_sqrt;
            }
        }
        self.push(
            Shape::Matrix { rows: n, cols: n_heads },
            out,
            Op::HeadScores { keys, query, n_heads },
        )
    }

    /// Mix stacked value rows with per-head attention weights.
    ///
    /// `weights` is n×n_heads, `values` is n×d; output has length d with
    /// entry `c = Σⱼ weights(j, head(c)) · values(j, c)`.
    pub fn head_mix(
        &mut self,
        weights: TensorId,
        values: TensorId,
        n_heads: usize,
    ) -> Result<TensorId> {
        let (n, h) = match *self.shape(weights) {
            Shape::Matrix { rows, cols } => (rows, cols),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "head_mix",
                    detail: format!("weights must be a matrix, got {s:?}"),
                })
            }
        };
        let (n2, d) = match *self.shape(values) {
            Shape::Matrix { rows, cols } => (rows, cols),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "head_mix",
                    detail: format!("values must be a matrix, got {s:?}"),
                })
            }
        };
        if n != n2 || h != n_heads || n_heads == 0 || d % n_heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "head_mix",
                detail: format!("weights {n}x{h}, values {n2}x{d}, heads {n_heads}"),
            });
        }
        let dh = d / n_heads;
        let wv = self.value(weights);
        let vv = self.value(values);
        let mut out = vec![0.0; d];
        for j in 0..n {
            let vrow = &vv[j * d..(j + 1) * d];
            let wrow = &wv[j * n_heads..(j + 1) * n_heads];
            for (c, o) in out.iter_mut().enumerate() {
                *o += wrow[c / dh] * vrow[c];
            }
        }
        self.push(Shape::Vector(d), out, Op::HeadMix { weights, values, n_heads })
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("dot", a, b)?;
        let v: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(Shape::Scalar, vec![v], Op::Dot(a, b))
    }

    /// Cosine similarity with an epsilon denominator guard: when the
    /// product of norms is at or below [`COSINE_EPS`] the result is 0
    /// and no gradient flows.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("cosine_sim", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let denom = norm(av) * norm(bv);
        let v = if denom <= COSINE_EPS { 0.0 } else { dot / denom };
        self.push(Shape::Scalar, vec![v], Op::CosineSim(a, b))
    }

    /// Numerically stable `log(sigmoid(x))` of a scalar.
    pub fn log_sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        if self.shape(a).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "log_sigmoid",
                detail: format!("expected a scalar, got {:?}", self.shape(a)),
            });
        }
        let x = self.value(a)[0];
        let v = log_sigmoid(x);
        self.push(Shape::Scalar, vec![v], Op::LogSigmoid(a))
    }

    /// Max-subtracted log-sum-exp of a vector, as a scalar.
    pub fn log_sum_exp(&mut self, a: TensorId) -> Result<TensorId> {
        if matches!(self.shape(a), Shape::Matrix { .. }) || self.shape(a).is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "log_sum_exp",
                detail: format!("expected a nonempty vector, got {:?}", self.shape(a)),
            });
        }
        let av = self.value(a);
        let m = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = av.iter().map(|&x| (x - m).exp()).sum();
        self.push(Shape::Scalar, vec![m + s.ln()], Op::LogSumExp(a))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let v: f64 = self.value(a).iter().sum();
        self.push(Shape::Scalar, vec![v], Op::Sum(a))
    }

    /// Arithmetic mean of same-shape terms; convenience over add_n + scale.
    pub fn mean_of(&mut self, terms: &[TensorId]) -> Result<TensorId> {
        let s = self.add_n(terms)?;
        self.scale(s, 1.0 / terms.len() as f64)
    }

    // ------------------------------------------------------------------
    // Reverse pass
    // ------------------------------------------------------------------

    /// Reverse pass from a scalar loss. Parameter gradients accumulate
    /// into `store`; every node reachable from the loss gets its grad
    /// slot filled. Errors if called twice on one tape.
    pub fn backward(&mut self, loss: TensorId, store: &mut ParameterStore) -> Result<()> {
        if self.backward_ran {
            return Err(TensorError::BackwardAlreadyRan);
        }
        if self.shapes[loss.0] != Shape::Scalar {
            return Err(TensorError::NonScalarLoss(self.shapes[loss.0].clone()));
        }
        self.backward_ran = true;
        self.grads[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() {
                continue;
            }
            // Take the output grad so inputs (always at lower indices)
            // can be borrowed mutably.
            let g = std::mem::take(&mut self.grads[i]);
            propagate(&self.ops, &self.shapes, &self.values, &mut self.grads, i, &g, store);
            self.grads[i] = g;
        }
        Ok(())
    }
}

fn ensure_grad(grads: &mut [Vec<f64>], values: &[Vec<f64>], id: usize) {
    if grads[id].is_empty() {
        grads[id] = vec![0.0; values[id].len()];
    }
}

#[allow(clippy::too_many_arguments)]
fn propagate(
    ops: &[Op],
    shapes: &[Shape],
    values: &[Vec<f64>],
    grads: &mut [Vec<f64>],
    idx: usize,
    g: &[f64],
    store: &mut ParameterStore,
) {
    match ops[idx] {
        Op::Const => {}
        Op::Param(pid) => store.accumulate_grad(pid, g),
        Op::Add(a, b) => {
            for &t in &[a, b] {
                ensure_grad(grads, values, t.0);
                for (o, gi) in grads[t.0].iter_mut().zip(g) {
                    *o += gi;
                }
            }
        }
        Op::AddN(ref inputs) => {
            for &t in inputs {
                ensure_grad(grads, values, t.0);
                for (o, gi) in grads[t.0].iter_mut().zip(g) {
                    *o += gi;
                }
            }
        }
        Op::Sub(a, b) => {
            ensure_grad(grads, values, a.0);
            for (o, gi) in grads[a.0].iter_mut().zip(g) {
                *o += gi;
            }
            ensure_grad(grads, values, b.0);
            for (o, gi) in grads[b.0].iter_mut().zip(g) {
                *o -= gi;
            }
        }
        Op::Mul(a, b) => {
            ensure_grad(grads, values, a.0);
            for ((o, gi), x) in grads[a.0].iter_mut().zip(g).zip(&values[b.0]) {
                *o += gi * x;
            }
            ensure_grad(grads, values, b.0);
            for ((o, gi), x) in grads[b.0].iter_mut().zip(g).zip(&values[a.0]) {
                *o += gi * x;
            }
        }
        Op::Scale(a, c) => {
            ensure_grad(grads, values, a.0);
            for (o, gi) in grads[a.0].iter_mut().zip(g) {
                *o += gi * c;
            }
        }
        Op::AddScalar(a) => {
            ensure_grad(grads, values, a.0);
            for (o, gi) in grads[a.0].iter_mut().zip(g) {
                *o += gi;
            }
        }
        Op::MatVec(m, v) => {
            let cols = values[v.0].len();
            ensure_grad(grads, values, m.0);
            {
                let gm = &mut grads[m.0];
                let vv = &values[v.0];
                for (r, gi) in g.iter().enumerate() {
                    for (o, x) in gm[r * cols..(r + 1) * cols].iter_mut().zip(vv) {
                        *o += gi * x;
                    }
                }
            }
            ensure_grad(grads, values, v.0);
            {
                let gv = &mut grads[v.0];
                let mv = &values[m.0];
                for (r, gi) in g.iter().enumerate() {
                    for (o, x) in gv.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                        *o += gi * x;
                    }
                }
            }
        }
        Op::MatMulT(x, w) => {
            let (n, k) = match shapes[x.0] {
                Shape::Matrix { rows, cols } => (rows, cols),
                _ => unreachable!(),
            };
            let m = values[w.0].len() / k;
            ensure_grad(grads, values, x.0);
            {
                let gx = &mut grads[x.0];
                let wv = &values[w.0];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    let xrow = &mut gx[i * k..(i + 1) * k];
                    for (j, gij) in grow.iter().enumerate() {
                        for (o, wjc) in xrow.iter_mut().zip(&wv[j * k..(j + 1) * k]) {
                            *o += gij * wjc;
                        }
                    }
                }
            }
            ensure_grad(grads, values, w.0);
            {
                let gw = &mut grads[w.0];
                let xv = &values[x.0];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    let xrow = &xv[i * k..(i + 1) * k];
                    for (j, gij) in grow.iter().enumerate() {
                        for (o, xic) in gw[j * k..(j + 1) * k].iter_mut().zip(xrow) {
                            *o += gij * xic;
                        }
                    }
                }
            }
        }
        Op::StackRows(ref rows) => {
            let cols = g.len() / rows.len();
            for (i, &r) in rows.iter().enumerate() {
                ensure_grad(grads, values, r.0);
                for (o, gi) in grads[r.0].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                    *o += gi;
                }
            }
        }
        Op::Concat(ref parts) => {
            let mut off = 0;
            for &p in parts {
                let len = values[p.0].len();
                ensure_grad(grads, values, p.0);
                for (o, gi) in grads[p.0].iter_mut().zip(&g[off..off + len]) {
                    *o += gi;
                }
                off += len;
            }
        }
        Op::Slice { input, start } => {
            ensure_grad(grads, values, input.0);
            for (o, gi) in grads[input.0][start..start + g.len()].iter_mut().zip(g) {
                *o += gi;
            }
        }
        Op::Sigmoid(a) => {
            ensure_grad(grads, values, a.0);
            for ((o, gi), y) in grads[a.0].iter_mut().zip(g).zip(&values[idx]) {
                *o += gi * y * (1.0 - y);
            }
        }
        Op::Tanh(a) => {
            ensure_grad(grads, values, a.0);
            for ((o, gi), y) in grads[a.0].iter_mut().zip(g).zip(&values[idx]) {
                *o += gi * (1.0 - y * y);
            }
        }
        Op::Cos(a) => {
            ensure_grad(grads, values, a.0);
            for ((o, gi), x) in grads[a.0].iter_mut().zip(g).zip(&values[a.0]) {
                *o -= gi * x.sin();
            }
        }
        Op::Softmax(a) => {
            let yv = &values[idx];
            let dot: f64 = g.iter().zip(yv).map(|(gi, y)| gi * y).sum();
            ensure_grad(grads, values, a.0);
            for ((o, gi), y) in grads[a.0].iter_mut().zip(g).zip(yv) {
                *o += y * (gi - dot);
            }
        }
        Op::SoftmaxCols(a) => {
            let (rows, cols) = match shapes[idx] {
                Shape::Matrix { rows, cols } => (rows, cols),
                _ => unreachable!(),
            };
            let yv = &values[idx];
            ensure_grad(grads, values, a.0);
            let ga = &mut grads[a.0];
            for c in 0..cols {
                let dot: f64 = (0..rows).map(|r| g[r * cols + c] * yv[r * cols + c]).sum();
                for r in 0..rows {
                    let y = yv[r * cols + c];
                    ga[r * cols + c] += y * (g[r * cols + c] - dot);
                }
            }
        }
        Op::HeadScores { keys, query, n_heads } => {
            let (n, d) = match shapes[keys.0] {
                Shape::Matrix { rows, cols } => (rows, cols),
                _ => unreachable!(),
            };
            let dh = d / n_heads;
            let inv_sqrt = 1.0 / (dh as f64).sqrt();
            ensure_grad(grads, values, keys.0);
            {
                let gk = &mut grads[keys.0];
                let qv = &values[query.0];
                for j in 0..n {
                    for (c, o) in gk[j * d..(j + 1) * d].iter_mut().enumerate() {
                        *o += g[j * n_heads + c / dh] * qv[c] * inv_sqrt;
                    }
                }
            }
            ensure_grad(grads, values, query.0);
            {
                let gq = &mut grads[query.0];
                let kv = &values[keys.0];
                for j in 0..n {
                    let krow = &kv[j * d..(j + 1) * d];
                    for (c, o) in gq.iter_mut().enumerate() {
                        *o += g[j * n_heads + c / dh] * krow[c] * inv_sqrt;
                    }
                }
            }
        }
        Op::HeadMix { weights, values: vals_id, n_heads } => {
            let (n, d) = match shapes[vals_id.0] {
                Shape::Matrix { rows, cols } => (rows, cols),
                _ => unreachable!(),
            };
            let dh = d / n_heads;
            ensure_grad(grads, values, weights.0);
            {
                let gw = &mut grads[weights.0];
                let vv = &values[vals_id.0];
                for j in 0..n {
                    let vrow = &vv[j * d..(j + 1) * d];
                    for h in 0..n_heads {
                        let s: f64 = (h * dh..(h + 1) * dh).map(|c| g[c] * vrow[c]).sum();
                        gw[j * n_heads + h] += s;
                    }
                }
            }
            ensure_grad(grads, values, vals_id.0);
            {
                let gv = &mut grads[vals_id.0];
                let wv = &values[weights.0];
                for j in 0..n {
                    let wrow = &wv[j * n_heads..(j + 1) * n_heads];
                    for (c, o) in gv[j * d..(j + 1) * d].iter_mut().enumerate() {
                        *o += wrow[c / dh] * g[c];
                    }
                }
            }
        }
        Op::Dot(a, b) => {
            let gi = g[0];
            ensure_grad(grads, values, a.0);
            for (o, x) in grads[a.0].iter_mut().zip(&values[b.0]) {
                *o += gi * x;
            }
            ensure_grad(grads, values, b.0);
            for (o, x) in grads[b.0].iter_mut().zip(&values[a.0]) {
                *o += gi * x;
            }
        }
        Op::CosineSim(a, b) => {
            let na = norm(&values[a.0]);
            let nb = norm(&values[b.0]);
            let denom = na * nb;
            if denom <= COSINE_EPS {
                return; // guarded branch: similarity 0, zero gradient
            }
            let dot: f64 = values[a.0].iter().zip(&values[b.0]).map(|(x, y)| x * y).sum();
            let gi = g[0];
            ensure_grad(grads, values, a.0);
            for (c, o) in grads[a.0].iter_mut().enumerate() {
                let x = values[a.0][c];
                let y = values[b.0][c];
                *o += gi * (y / denom - dot * x / (na * na * denom));
            }
            ensure_grad(grads, values, b.0);
            for (c, o) in grads[b.0].iter_mut().enumerate() {
                let x = values[a.0][c];
                let y = values[b.0][c];
                *o += gi * (x / denom - dot * y / (nb * nb * denom));
            }
        }
        Op::LogSigmoid(a) => {
            let x = values[a.0][0];
            ensure_grad(grads, values, a.0);
            grads[a.0][0] += g[0] * sigmoid(-x);
        }
        Op::LogSumExp(a) => {
            let sm = softmax_slice(&values[a.0]);
            ensure_grad(grads, values, a.0);
            for (o, w) in grads[a.0].iter_mut().zip(&sm) {
                *o += g[0] * w;
            }
        }
        Op::Sum(a) => {
            ensure_grad(grads, values, a.0);
            for o in grads[a.0].iter_mut() {
                *o += g[0];
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const => "const",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::AddN(_) => "add_n",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::MatVec(..) => "matvec",
        Op::MatMulT(..) => "matmul_t",
        Op::StackRows(_) => "stack_rows",
        Op::Concat(_) => "concat",
        Op::Slice { .. } => "slice",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Cos(_) => "cos",
        Op::Softmax(_) => "softmax",
        Op::SoftmaxCols(_) => "softmax_cols",
        Op::HeadScores { .. } => "head_scores",
        Op::HeadMix { .. } => "head_mix",
        Op::Dot(..) => "dot",
        Op::CosineSim(..) => "cosine_sim",
        Op::LogSigmoid(_) => "log_sigmoid",
        Op::LogSumExp(_) => "log_sum_exp",
        Op::Sum(_) => "sum",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` via the stable softplus branch form.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
