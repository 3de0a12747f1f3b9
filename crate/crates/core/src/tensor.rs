//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is a per-forward-pass tape: every operation appends a node
//! holding its output values plus enough context to run the backward rule.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every `requires_grad` ancestor of the loss. The tape is dropped
//! after the gradients have been harvested; there are no higher-order
//! gradients.
//!
//! The engine is generic over [`Element`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::Rng;
use rand::Rng as _;
use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn neg_infinity() -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Handle to a node on a [`Graph`] tape.
pub type TensorId = usize;

/// A value on the tape: shape, row-major values, lazily allocated gradient
/// and the op that produced it.
#[derive(Debug)]
pub struct Tensor<T: Element> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
    op: Op<T>,
}

/// A named trainable tensor living outside any tape.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Self {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: shape/value mismatch"
        );
        Parameter {
            name,
            shape,
            values,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![T::ZERO; self.values.len()]);
    }
}

/// Op trace kept per node so the backward pass can replay the chain rule.
#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    /// Same values, new shape bookkeeping.
    Reshape(TensorId),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, T),
    /// `[r x c] + [c]`, broadcast down the rows.
    AddRow(TensorId, TensorId),
    /// `[r x c] + [r]`, broadcast across the columns.
    AddCol(TensorId, TensorId),
    /// `a[m x k] @ b[k x n]`
    MatMul(TensorId, TensorId),
    /// `a[m x k] @ b[n x k]^T`
    MatMulNT(TensorId, TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// Per-row mean and 1/sqrt(var+eps) saved from the forward pass.
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: TensorId,
        keep: Vec<bool>,
        scale: T,
    },
    SumAll(TensorId),
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
    },
    GatherEntries {
        x: TensorId,
        coords: Vec<(usize, usize)>,
    },
    /// Place `x[i]` at `positions[i]` of a zero vector of length `len`.
    ScatterVec {
        x: TensorId,
        positions: Vec<usize>,
    },
    ConcatCols(TensorId, TensorId),
    SliceCols {
        x: TensorId,
        from: usize,
        to: usize,
    },
    SliceRows {
        x: TensorId,
        from: usize,
        to: usize,
    },
    StackRows(Vec<TensorId>),
    /// `out[i][j] = x[i][clip(j - i + w, 0, 2w)]` for `x: [n x (2w+1)]`.
    RelGather {
        x: TensorId,
        window: usize,
    },
    /// Log-sum-exp down each column: `[r x c] -> [c]`.
    LogSumExpCols(TensorId),
    /// Log-sum-exp over every element: `-> [1]`.
    LogSumExpAll(TensorId),
}

/// The tape. One per forward pass; single-threaded by construction.
pub struct Graph<T: Element> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matmul kernels (accumulate into out) ───────────────────────────

fn mm_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let (brow, orow) = (&b[p * n..p * n + n], &mut out[i * n..i * n + n]);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out += a @ b^T` for `a: [m x k]`, `b: [n x k]`.
fn mm_nt_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        for p in 0..n {
            let brow = &b[p * k..p * k + k];
            let mut s = T::ZERO;
            for q in 0..k {
                s += arow[q] * brow[q];
            }
            out[i * n + p] += s;
        }
    }
}

/// `out += a^T @ b` for `a: [p x m]`, `b: [p x n]`, out `[m x n]`.
fn mm_tn_acc<T: Element>(a: &[T], b: &[T], p: usize, m: usize, n: usize, out: &mut [T]) {
    for r in 0..p {
        let brow = &b[r * n..r * n + n];
        for i in 0..m {
            let av = a[r * m + i];
            let orow = &mut out[i * n..i * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: TensorId) -> &[T] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    /// Scalar convenience accessor; panics if the node is not a scalar.
    pub fn scalar(&self, id: TensorId) -> T {
        assert_eq!(self.nodes[id].values.len(), 1, "not a scalar node");
        self.nodes[id].values[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Tensor {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    fn dims2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        match *self.nodes[id].shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dimension(op, &self.nodes[id].shape, &[])),
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> TensorId {
        assert_eq!(numel(&shape), values.len(), "constant: shape/value mismatch");
        self.push(shape, values, false, Op::Leaf)
    }

    /// Differentiable leaf (receives a gradient on backward).
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<T>) -> TensorId {
        assert_eq!(numel(&shape), values.len(), "leaf: shape/value mismatch");
        self.push(shape, values, true, Op::Leaf)
    }

    /// Differentiable leaf bound to a [`Parameter`] (values are copied onto
    /// the tape; the caller harvests the gradient afterwards).
    pub fn param(&mut self, p: &Parameter<T>) -> TensorId {
        self.push(p.shape.clone(), p.values.clone(), true, Op::Leaf)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[x].values.len() {
            return Err(Error::dimension("reshape", &self.nodes[x].shape, &shape));
        }
        let values = self.nodes[x].values.clone();
        Ok(self.push(shape, values, self.needs(x), Op::Reshape(x)))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::dimension("add", &self.nodes[a].shape, &self.nodes[b].shape));
        }
        let values: Vec<T> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a].shape.clone(), values, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::dimension("mul", &self.nodes[a].shape, &self.nodes[b].shape));
        }
        let values: Vec<T> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a].shape.clone(), values, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let values: Vec<T> = self.nodes[x].values.iter().map(|&v| v * c).collect();
        self.push(self.nodes[x].shape.clone(), values, self.needs(x), Op::Scale(x, c))
    }

    /// `[r x c] + [c]` broadcast over rows (bias add).
    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("add_row", x)?;
        if self.nodes[v].values.len() != c {
            return Err(Error::dimension("add_row", &self.nodes[x].shape, &self.nodes[v].shape));
        }
        let mut values = self.nodes[x].values.clone();
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] += self.nodes[v].values[j];
            }
        }
        let rg = self.needs(x) || self.needs(v);
        Ok(self.push(vec![r, c], values, rg, Op::AddRow(x, v)))
    }

    /// `[r x c] + [r]` broadcast across columns.
    pub fn add_col(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("add_col", x)?;
        if self.nodes[v].values.len() != r {
            return Err(Error::dimension("add_col", &self.nodes[x].shape, &self.nodes[v].shape));
        }
        let mut values = self.nodes[x].values.clone();
        for i in 0..r {
            let vi = self.nodes[v].values[i];
            for j in 0..c {
                values[i * c + j] += vi;
            }
        }
        let rg = self.needs(x) || self.needs(v);
        Ok(self.push(vec![r, c], values, rg, Op::AddCol(x, v)))
    }

    // ── matrix products ─────────────────────────────────────────────────

    /// `a[m x k] @ b[k x n] -> [m x n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dimension("matmul", &self.nodes[a].shape, &self.nodes[b].shape));
        }
        let mut values = vec![T::ZERO; m * n];
        mm_acc(&self.nodes[a].values, &self.nodes[b].values, m, k, n, &mut values);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], values, rg, Op::MatMul(a, b)))
    }

    /// `a[m x k] @ b[n x k]^T -> [m x n]`
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dimension("matmul_nt", &self.nodes[a].shape, &self.nodes[b].shape));
        }
        let mut values = vec![T::ZERO; m * n];
        mm_nt_acc(&self.nodes[a].values, &self.nodes[b].values, m, k, n, &mut values);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], values, rg, Op::MatMulNT(a, b)))
    }

    // ── activations ─────────────────────────────────────────────────────

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let values: Vec<T> = self.nodes[x]
            .values
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        self.push(self.nodes[x].shape.clone(), values, self.needs(x), Op::Relu(x))
    }

    /// tanh-approximation GELU (GPT-2 flavor).
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let (s, c) = gelu_consts::<T>();
        let half = T::from_f64(0.5);
        let values: Vec<T> = self.nodes[x]
            .values
            .iter()
            .map(|&v| {
                let u = s * (v + c * v * v * v);
                half * v * (T::ONE + u.tanh())
            })
            .collect();
        self.push(self.nodes[x].shape.clone(), values, self.needs(x), Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let values: Vec<T> = self.nodes[x]
            .values
            .iter()
            .map(|&v| T::ONE / (T::ONE + (-v).exp()))
            .collect();
        self.push(self.nodes[x].shape.clone(), values, self.needs(x), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let values: Vec<T> = self.nodes[x].values.iter().map(|&v| v.tanh()).collect();
        self.push(self.nodes[x].shape.clone(), values, self.needs(x), Op::Tanh(x))
    }

    // ── row-wise softmax family ─────────────────────────────────────────

    /// Numerically stable softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("softmax_rows", x)?;
        if c == 0 {
            return Err(Error::dimension("softmax_rows", &self.nodes[x].shape, &[]));
        }
        let mut values = vec![T::ZERO; r * c];
        for i in 0..r {
            let row = &self.nodes[x].values[i * c..(i + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.maximum(v));
            let mut sum = T::ZERO;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                values[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                values[i * c + j] = values[i * c + j] / sum;
            }
        }
        Ok(self.push(vec![r, c], values, self.needs(x), Op::SoftmaxRows(x)))
    }

    /// Numerically stable log-softmax along the last axis of a 2-D tensor.
    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("log_softmax_rows", x)?;
        if c == 0 {
            return Err(Error::dimension("log_softmax_rows", &self.nodes[x].shape, &[]));
        }
        let mut values = vec![T::ZERO; r * c];
        for i in 0..r {
            let row = &self.nodes[x].values[i * c..(i + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.maximum(v));
            let mut sum = T::ZERO;
            for j in 0..c {
                sum += (row[j] - mx).exp();
            }
            let lse = mx + sum.ln();
            for j in 0..c {
                values[i * c + j] = row[j] - lse;
            }
        }
        Ok(self.push(vec![r, c], values, self.needs(x), Op::LogSoftmaxRows(x)))
    }

    // ── normalization & regularization ──────────────────────────────────

    /// Per-row standardization (population variance) followed by an affine
    /// transform: `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: T) -> Result<TensorId> {
        let (r, c) = self.dims2("layer_norm", x)?;
        if self.nodes[gain].values.len() != c || self.nodes[bias].values.len() != c {
            return Err(Error::dimension("layer_norm", &self.nodes[x].shape, &self.nodes[gain].shape));
        }
        let inv_c = T::ONE / T::from_f64(c as f64);
        let mut values = vec![T::ZERO; r * c];
        let mut mean = vec![T::ZERO; r];
        let mut inv_std = vec![T::ZERO; r];
        for i in 0..r {
            let row = &self.nodes[x].values[i * c..(i + 1) * c];
            let mut mu = T::ZERO;
            for &v in row {
                mu += v;
            }
            mu *= inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_c;
            let inv = T::ONE / (var + eps).sqrt();
            mean[i] = mu;
            inv_std[i] = inv;
            for j in 0..c {
                let xhat = (row[j] - mu) * inv;
                values[i * c + j] = self.nodes[gain].values[j] * xhat + self.nodes[bias].values[j];
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            vec![r, c],
            values,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1-rate)`. Identity when `training` is false or `rate == 0`.
    pub fn dropout(&mut self, x: TensorId, rate: f64, training: bool, rng: &mut Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            let values = self.nodes[x].values.clone();
            return Ok(self.push(self.nodes[x].shape.clone(), values, self.needs(x), Op::Reshape(x)));
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<bool> = (0..self.nodes[x].values.len())
            .map(|_| rng.gen::<f64>() >= rate)
            .collect();
        let values: Vec<T> = self.nodes[x]
            .values
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { T::ZERO })
            .collect();
        let rg = self.needs(x);
        Ok(self.push(self.nodes[x].shape.clone(), values, rg, Op::Dropout { x, keep, scale }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum of all elements, as a `[1]` scalar node.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut s = T::ZERO;
        for &v in &self.nodes[x].values {
            s += v;
        }
        self.push(vec![1], vec![s], self.needs(x), Op::SumAll(x))
    }

    /// Log-sum-exp down each column: `[r x c] -> [c]`.
    pub fn logsumexp_cols(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("logsumexp_cols", x)?;
        let vals = &self.nodes[x].values;
        let mut out = vec![T::ZERO; c];
        for j in 0..c {
            let mut mx = T::neg_infinity();
            for i in 0..r {
                mx = mx.maximum(vals[i * c + j]);
            }
            let mut sum = T::ZERO;
            for i in 0..r {
                sum += (vals[i * c + j] - mx).exp();
            }
            out[j] = mx + sum.ln();
        }
        let rg = self.needs(x);
        Ok(self.push(vec![c], out, rg, Op::LogSumExpCols(x)))
    }

    /// Log-sum-exp over every element: `-> [1]`.
    pub fn logsumexp_all(&mut self, x: TensorId) -> TensorId {
        let vals = &self.nodes[x].values;
        let mx = vals.iter().fold(T::neg_infinity(), |m, &v| m.maximum(v));
        let mut sum = T::ZERO;
        for &v in vals {
            sum += (v - mx).exp();
        }
        let out = mx + sum.ln();
        self.push(vec![1], vec![out], self.needs(x), Op::LogSumExpAll(x))
    }

    // ── gather / scatter / layout ───────────────────────────────────────

    /// Row gather (embedding lookup): `x[v x c]`, `idx[m] -> [m x c]`.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (v, c) = self.dims2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("gather_rows: row {bad} out of range {v}")));
        }
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            values.extend_from_slice(&self.nodes[x].values[i * c..(i + 1) * c]);
        }
        let rg = self.needs(x);
        Ok(self.push(
            vec![idx.len(), c],
            values,
            rg,
            Op::GatherRows { x, idx: idx.to_vec() },
        ))
    }

    /// Entry gather: picks `x[r][c]` for each `(r, c)` coordinate -> `[len]`.
    pub fn gather_entries(&mut self, x: TensorId, coords: &[(usize, usize)]) -> Result<TensorId> {
        let (r, c) = self.dims2("gather_entries", x)?;
        if let Some(&(br, bc)) = coords.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::Contract(format!(
                "gather_entries: coord ({br},{bc}) out of range ({r},{c})"
            )));
        }
        let values: Vec<T> = coords.iter().map(|&(i, j)| self.nodes[x].values[i * c + j]).collect();
        let rg = self.needs(x);
        Ok(self.push(
            vec![coords.len()],
            values,
            rg,
            Op::GatherEntries {
                x,
                coords: coords.to_vec(),
            },
        ))
    }

    /// Place `x[i]` at `positions[i]` of a zero vector of length `len`.
    pub fn scatter_vec(&mut self, x: TensorId, positions: &[usize], len: usize) -> Result<TensorId> {
        if self.nodes[x].values.len() != positions.len() {
            return Err(Error::Contract(format!(
                "scatter_vec: {} values for {} positions",
                self.nodes[x].values.len(),
                positions.len()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= len) {
            return Err(Error::Contract(format!("scatter_vec: position {bad} out of range {len}")));
        }
        let mut values = vec![T::ZERO; len];
        for (i, &p) in positions.iter().enumerate() {
            values[p] += self.nodes[x].values[i];
        }
        let rg = self.needs(x);
        Ok(self.push(
            vec![len],
            values,
            rg,
            Op::ScatterVec {
                x,
                positions: positions.to_vec(),
            },
        ))
    }

    /// `[r x p] ++ [r x q] -> [r x (p+q)]`
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::dimension("concat_cols", &self.nodes[a].shape, &self.nodes[b].shape));
        }
        let mut values = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            values.extend_from_slice(&self.nodes[a].values[i * ca..(i + 1) * ca]);
            values.extend_from_slice(&self.nodes[b].values[i * cb..(i + 1) * cb]);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![ra, ca + cb], values, rg, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if from >= to || to > c {
            return Err(Error::Contract(format!("slice_cols: [{from}, {to}) out of range {c}")));
        }
        let w = to - from;
        let mut values = Vec::with_capacity(r * w);
        for i in 0..r {
            values.extend_from_slice(&self.nodes[x].values[i * c + from..i * c + to]);
        }
        let rg = self.needs(x);
        Ok(self.push(vec![r, w], values, rg, Op::SliceCols { x, from, to }))
    }

    pub fn slice_rows(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if from >= to || to > r {
            return Err(Error::Contract(format!("slice_rows: [{from}, {to}) out of range {r}")));
        }
        let values = self.nodes[x].values[from * c..to * c].to_vec();
        let rg = self.needs(x);
        Ok(self.push(vec![to - from, c], values, rg, Op::SliceRows { x, from, to }))
    }

    /// Stack `n` nodes of identical width (each `[c]` or `[1 x c]`) into `[n x c]`.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows: empty row list".into()));
        }
        let c = self.nodes[rows[0]].values.len();
        let mut values = Vec::with_capacity(rows.len() * c);
        let mut rg = false;
        for &r in rows {
            if self.nodes[r].values.len() != c {
                return Err(Error::dimension("stack_rows", &self.nodes[rows[0]].shape, &self.nodes[r].shape));
            }
            values.extend_from_slice(&self.nodes[r].values);
            rg |= self.needs(r);
        }
        Ok(self.push(vec![rows.len(), c], values, rg, Op::StackRows(rows.to_vec())))
    }

    /// Spread relative-offset scores into a square score matrix:
    /// `x: [n x (2w+1)]` -> `out[i][j] = x[i][clip(j - i + w, 0, 2w)]`.
    pub fn rel_gather(&mut self, x: TensorId, window: usize) -> Result<TensorId> {
        let (n, c) = self.dims2("rel_gather", x)?;
        if c != 2 * window + 1 {
            return Err(Error::dimension("rel_gather", &self.nodes[x].shape, &[n, 2 * window + 1]));
        }
        let w = window as isize;
        let mut values = vec![T::ZERO; n * n];
        for i in 0..n {
            for j in 0..n {
                let off = (j as isize - i as isize + w).clamp(0, 2 * w) as usize;
                values[i * n + j] = self.nodes[x].values[i * c + off];
            }
        }
        let rg = self.needs(x);
        Ok(self.push(vec![n, n], values, rg, Op::RelGather { x, window }))
    }

    // ── backward ────────────────────────────────────────────────────────

    fn ensure_grad(&mut self, id: TensorId) -> &mut [T] {
        let n = self.nodes[id].values.len();
        self.nodes[id].grad.get_or_insert_with(|| vec![T::ZERO; n])
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` ancestor.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.ensure_grad(loss)[0] = T::ONE;
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.take().expect("grad present");
            self.backprop_node(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: TensorId, g: &[T]) {
        // Ops only reference earlier nodes, so reverse index order is a
        // valid topological order.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Reshape(x) => {
                if self.needs(x) {
                    let gx = self.ensure_grad(x);
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
            &Op::Add(a, b) => {
                for side in [a, b] {
                    if self.needs(side) {
                        let gs = self.ensure_grad(side);
                        for (dst, &src) in gs.iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.nodes[b].values.clone();
                    let ga = self.ensure_grad(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a].values.clone();
                    let gb = self.ensure_grad(b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.needs(x) {
                    let gx = self.ensure_grad(x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * c;
                    }
                }
            }
            &Op::AddRow(x, v) => {
                let c = self.nodes[v].values.len();
                if self.needs(x) {
                    let gx = self.ensure_grad(x);
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.needs(v) {
                    let gv = self.ensure_grad(v);
                    for (i, &src) in g.iter().enumerate() {
                        gv[i % c] += src;
                    }
                }
            }
            &Op::AddCol(x, v) => {
                let r = self.nodes[v].values.len();
                let c = g.len() / r;
                if self.needs(x) {
                    let gx = self.ensure_grad(x);
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.needs(v) {
                    let gv = self.ensure_grad(v);
                    for i in 0..r {
                        for j in 0..c {
                            gv[i] += g[i * c + j];
                        }
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.needs(a) {
                    let bv = self.nodes[b].values.clone();
                    let ga = self.ensure_grad(a);
                    mm_nt_acc(g, &bv, m, n, k, ga);
                }
                if self.needs(b) {
                    let av = self.nodes[a].values.clone();
                    let gb = self.ensure_grad(b);
                    mm_tn_acc(&av, g, m, k, n, gb);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[0];
                if self.needs(a) {
                    let bv = self.nodes[b].values.clone();
                    let ga = self.ensure_grad(a);
                    mm_acc(g, &bv, m, n, k, ga);
                }
                if self.needs(b) {
                    let av = self.nodes[a].values.clone();
                    let gb = self.ensure_grad(b);
                    mm_tn_acc(g, &av, m, n, k, gb);
                }
            }
            &Op::Relu(x) => {
                if self.needs(x) {
                    let xv = self.nodes[x].values.clone();
                    let gx = self.ensure_grad(x);
                    for i in 0..g.len() {
                        if xv[i] > T::ZERO {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.needs(x) {
                    let (s, c) = gelu_consts::<T>();
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xv = self.nodes[x].values.clone();
                    let gx = self.ensure_grad(x);
                    for i in 0..g.len() {
                        let v = xv[i];
                        let u = s * (v + c * v * v * v);
                        let t = u.tanh();
                        let du = s * (T::ONE + three * c * v * v);
                        let d = half * (T::ONE + t) + half * v * (T::ONE - t * t) * du;
                        gx[i] += g[i] * d;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if self.needs(x) {
                    let yv = self.nodes[id].values.clone();
                    let gx = self.ensure_grad(x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * yv[i] * (T::ONE - yv[i]);
                    }
                }
            }
            &Op::Tanh(x) => {
                if self.needs(x) {
                    let yv = self.nodes[id].values.clone();
                    let gx = self.ensure_grad(x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * (T::ONE - yv[i] * yv[i]);
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if self.needs(x) {
                    let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                    let yv = self.nodes[id].values.clone();
                    let gx = self.ensure_grad(x);
                    for i in 0..r {
                        let mut dot = T::ZERO;
                        for j in 0..c {
                            dot += g[i * c + j] * yv[i * c + j];
                        }
                        for j in 0..c {
                            gx[i * c + j] += yv[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(x) => {
                if self.needs(x) {
                    let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                    let yv = self.nodes[id].values.clone();
                    let gx = self.ensure_grad(x);
                    for i in 0..r {
                        let mut gsum = T::ZERO;
                        for j in 0..c {
                            gsum += g[i * c + j];
                        }
                        for j in 0..c {
                            gx[i * c + j] += g[i * c + j] - yv[i * c + j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let xv = self.nodes[x].values.clone();
                let gainv = self.nodes[gain].values.clone();
                let inv_c = T::ONE / T::from_f64(c as f64);
                if self.needs(gain) {
                    let gg = self.ensure_grad(gain);
                    for i in 0..r {
                        for j in 0..c {
                            let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                            gg[j] += g[i * c + j] * xhat;
                        }
                    }
                }
                if self.needs(bias) {
                    let gb = self.ensure_grad(bias);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                if self.needs(x) {
                    let gx = self.ensure_grad(x);
                    for i in 0..r {
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        for j in 0..c {
                            let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                            let dxhat = g[i * c + j] * gainv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..c {
                            let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                            let dxhat = g[i * c + j] * gainv[j];
                            gx[i * c + j] +=
                                inv_std[i] * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Dropout { x, keep, scale } => {
                let (x, scale) = (*x, *scale);
                if self.needs(x) {
                    let keep = keep.clone();
                    let gx = self.ensure_grad(x);
                    for i in 0..g.len() {
                        if keep[i] {
                            gx[i] += g[i] * scale;
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                if self.needs(x) {
                    let gx = self.ensure_grad(x);
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            &Op::LogSumExpCols(x) => {
                if self.needs(x) {
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let xv = self.nodes[x].values.clone();
                    let out = self.nodes[id].values.clone();
                    let gx = self.ensure_grad(x);
                    for j in 0..c {
                        for i in 0..r {
                            gx[i * c + j] += g[j] * (xv[i * c + j] - out[j]).exp();
                        }
                    }
                }
            }
            &Op::LogSumExpAll(x) => {
                if self.needs(x) {
                    let xv = self.nodes[x].values.clone();
                    let out = self.nodes[id].values[0];
                    let gx = self.ensure_grad(x);
                    for i in 0..gx.len() {
                        gx[i] += g[0] * (xv[i] - out).exp();
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                if self.needs(x) {
                    let idx = idx.clone();
                    let c = self.nodes[x].shape[1];
                    let gx = self.ensure_grad(x);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::GatherEntries { x, coords } => {
                let x = *x;
                if self.needs(x) {
                    let coords = coords.clone();
                    let c = self.nodes[x].shape[1];
                    let gx = self.ensure_grad(x);
                    for (k, &(i, j)) in coords.iter().enumerate() {
                        gx[i * c + j] += g[k];
                    }
                }
            }
            Op::ScatterVec { x, positions } => {
                let x = *x;
                if self.needs(x) {
                    let positions = positions.clone();
                    let gx = self.ensure_grad(x);
                    for (i, &p) in positions.iter().enumerate() {
                        gx[i] += g[p];
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let (r, ca) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let cb = self.nodes[b].shape[1];
                let w = ca + cb;
                if self.needs(a) {
                    let ga = self.ensure_grad(a);
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * w + j];
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.ensure_grad(b);
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * w + ca + j];
                        }
                    }
                }
            }
            &Op::SliceCols { x, from, to } => {
                if self.needs(x) {
                    let c = self.nodes[x].shape[1];
                    let w = to - from;
                    let r = self.nodes[id].shape[0];
                    let gx = self.ensure_grad(x);
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + from + j] += g[i * w + j];
                        }
                    }
                }
            }
            &Op::SliceRows { x, from, to } => {
                if self.needs(x) {
                    let c = self.nodes[x].shape[1];
                    debug_assert_eq!(g.len(), (to - from) * c);
                    let gx = self.ensure_grad(x);
                    for (k, &src) in g.iter().enumerate() {
                        gx[from * c + k] += src;
                    }
                }
            }
            Op::StackRows(rows) => {
                let rows = rows.clone();
                let c = g.len() / rows.len();
                for (i, &r) in rows.iter().enumerate() {
                    if self.needs(r) {
                        let gr = self.ensure_grad(r);
                        for j in 0..c {
                            gr[j] += g[i * c + j];
                        }
                    }
                }
            }
            &Op::RelGather { x, window } => {
                if self.needs(x) {
                    let n = self.nodes[id].shape[0];
                    let c = 2 * window + 1;
                    let w = window as isize;
                    let gx = self.ensure_grad(x);
                    for i in 0..n {
                        for j in 0..n {
                            let off = (j as isize - i as isize + w).clamp(0, 2 * w) as usize;
                            gx[i * c + off] += g[i * n + j];
                        }
                    }
                }
            }
        }
    }
}

fn gelu_consts<T: Element>() -> (T, T) {
    (
        T::from_f64((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64(0.044715),
    )
}

/// Draw from a normal distribution via Box-Muller; used for weight init.
pub fn normal_sample(rng: &mut Rng, mean: f64, std: f64) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
