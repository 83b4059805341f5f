//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every differentiable op appends a node holding its output value and enough
//! saved state to compute the vector-Jacobian product. Nodes are appended in
//! execution order, so walking the tape backwards is a reverse topological
//! traversal and each node is visited exactly once.

use std::collections::HashMap;
use std::fmt;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of recorded operation, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchedMatMul,
    Add,
    AddBroadcast,
    Mul,
    Scale,
    Gelu,
    Sigmoid,
    Softmax,
    CausalMask,
    LayerNorm,
    Bce,
    BceWithLogits,
    Sum,
    Mean,
    Reshape,
    SplitHeads,
    MergeHeads,
    Concat,
    GatherCols,
    TakeRows,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::BatchedMatMul,
        OpKind::Add,
        OpKind::AddBroadcast,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::CausalMask,
        OpKind::LayerNorm,
        OpKind::Bce,
        OpKind::BceWithLogits,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
        OpKind::Concat,
        OpKind::GatherCols,
        OpKind::TakeRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchedMatMul => "batched_matmul",
            OpKind::Add => "add",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::CausalMask => "causal_mask",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Bce => "bce",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::SplitHeads => "split_heads",
            OpKind::MergeHeads => "merge_heads",
            OpKind::Concat => "concat",
            OpKind::GatherCols => "gather_cols",
            OpKind::TakeRows => "take_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

const GELU_COEF: f64 = 0.044715;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchedMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    Add { a: Var, b: Var },
    AddBroadcast { x: Var, y: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    CausalMask { x: Var, s: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Bce { p: Var, targets: Vec<T> },
    BceWithLogits { z: Var, targets: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize, head_dim: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize, head_dim: usize },
    Concat { a: Var, b: Var, rows: usize, na: usize, nb: usize },
    GatherCols { x: Var, cols: Vec<usize>, width: usize },
    TakeRows { x: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchedMatMul { .. } => OpKind::BatchedMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::CausalMask { .. } => OpKind::CausalMask,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Bce { .. } => OpKind::Bce,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::Concat { .. } => OpKind::Concat,
            Op::GatherCols { .. } => OpKind::GatherCols,
            Op::TakeRows { .. } => OpKind::TakeRows,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by the leaf they belong to.
#[derive(Debug, Default)]
pub struct Grads<T> {
    by_var: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.by_var.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

/// Records differentiable operations for one forward/backward pass.
///
/// A tape is single-use: [`Tape::backward`] consumes the recorded nodes and
/// any further use of the tape is an error.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// Dense kernels. Slices are row-major; outputs are accumulated into `c`.

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
            c[i * n + j] = c[i * n + j] + dot;
        }
    }
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + api * bv;
            }
        }
    }
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::c(GELU_COEF) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::c(GELU_COEF) * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::c(3.0 * GELU_COEF) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * du
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn check_targets<T: Scalar>(op: &'static str, targets: &[T]) -> Result<(), TensorError> {
    match targets
        .iter()
        .position(|&y| !(y >= T::zero() && y <= T::one()))
    {
        Some(i) => Err(TensorError::InvalidValue {
            op,
            reason: format!("target {} at index {i} is outside [0, 1]", targets[i]),
        }),
        None => Ok(()),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    /// Testing hook: makes the backward pass of `kind` return a deliberately
    /// wrong gradient (scaled by 1.5) so gradient checks can be shown to fail.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value recorded for `v`. Panics if the tape was consumed.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert!(!self.consumed, "tape values are cleared by backward");
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let kind = op.kind();
        if kind != OpKind::CausalMask && !value.is_finite() {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
            .expect("parameters must be finite and the tape unconsumed")
    }

    /// Records a constant leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
            .expect("constants must be finite and the tape unconsumed")
    }

    /// Fallible variant of [`Tape::constant`] for data that may be non-finite.
    pub fn try_constant(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, false)
    }

    /// `a[..., m, k] · b[k, n]`: leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with
    /// `b[B, n, k]` when `transpose_b` is set.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "batched_matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            if sb[2] != k {
                return Err(mismatch());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(mismatch());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let cb = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    gemm_nt(ab, bb, cb, m, k, n);
                } else {
                    gemm_nn(ab, bb, cb, m, k, n);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchedMatMul { a, b, batch, m, k, n, transpose_b },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, rg)
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`
    /// (bias vectors, position tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                left: sx,
                right: sy,
            });
        }
        let yv = self.value(y).data();
        let tail = yv.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yv[i % tail])
            .collect();
        let rg = self.rg(x) || self.rg(y);
        self.push(Tensor::from_parts(sx, data), Op::AddBroadcast { x, y }, rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Softmax over the last axis. Entries equal to `-inf` are masked and map
    /// to exactly zero; a row with every entry masked is an error.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = softmax_last_axis(self.value(x))?;
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Replaces entries above the diagonal of each trailing `s×s` matrix with
    /// `-inf`, so that row `i` may only attend to columns `≤ i`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(TensorError::InvalidShape {
                op: "causal_mask",
                shape,
                reason: "trailing axes must form a square matrix".into(),
            });
        }
        let s = shape[r - 1];
        let mut value = self.value(x).clone();
        for (idx, v) in value.data_mut().iter_mut().enumerate() {
            let col = idx % s;
            let row = (idx / s) % s;
            if col > row {
                *v = T::neg_infinity();
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::CausalMask { x, s }, rg)
    }

    /// Normalizes each last-axis slice to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if n < 2 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape,
                reason: "normalized axis needs at least 2 elements".into(),
            });
        }
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: shape,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        if !(eps > T::zero()) {
            return Err(TensorError::InvalidValue {
                op: "layer_norm",
                reason: "eps must be positive".into(),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let rows = xv.len() / n;
        let nf = T::c(n as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + bb[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            rg,
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against soft or hard
    /// targets in `[0, 1]`. Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, targets: &[T]) -> Result<Var, TensorError> {
        let pv = self.value(p).data();
        if pv.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                left: self.shape(p).to_vec(),
                right: vec![targets.len()],
            });
        }
        check_targets("bce", targets)?;
        let lo = T::c(PROB_CLAMP);
        let hi = T::one() - lo;
        let total: T = pv
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| {
                let q = pi.max(lo).min(hi);
                -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum();
        let loss = total / T::c(pv.len() as f64);
        let rg = self.rg(p);
        self.push(
            Tensor::scalar(loss),
            Op::Bce { p, targets: targets.to_vec() },
            rg,
        )
    }

    /// `bce(sigmoid(z), y)` evaluated directly from logits, which keeps a
    /// useful gradient when the sigmoid saturates.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[T]) -> Result<Var, TensorError> {
        let zv = self.value(z).data();
        if zv.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(z).to_vec(),
                right: vec![targets.len()],
            });
        }
        check_targets("bce_with_logits", targets)?;
        let total: T = zv
            .iter()
            .zip(targets)
            .map(|(&zi, &y)| softplus(zi) - y * zi)
            .sum();
        let loss = total / T::c(zv.len() as f64);
        let rg = self.rg(z);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { z, targets: targets.to_vec() },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::c(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// `[B, s, H·dh] → [B·H, s, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(heads) {
            return Err(TensorError::InvalidShape {
                op: "split_heads",
                shape,
                reason: format!("last axis must be divisible by {heads} heads"),
            });
        }
        let (batch, seq, width) = (shape[0], shape[1], shape[2]);
        let head_dim = width / heads;
        let out = permute_heads(self.value(x).data(), batch, seq, heads, head_dim, true);
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![batch * heads, seq, head_dim], out),
            Op::SplitHeads { x, batch, seq, heads, head_dim },
            rg,
        )
    }

    /// `[B·H, s, dh] → [B, s, H·dh]`, the inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[0].is_multiple_of(heads) {
            return Err(TensorError::InvalidShape {
                op: "merge_heads",
                shape,
                reason: format!("leading axis must be divisible by {heads} heads"),
            });
        }
        let (batch, seq, head_dim) = (shape[0] / heads, shape[1], shape[2]);
        let out = permute_heads(self.value(x).data(), batch, seq, heads, head_dim, false);
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![batch, seq, heads * head_dim], out),
            Op::MergeHeads { x, batch, seq, heads, head_dim },
            rg,
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let na = *sa.last().unwrap();
        let nb = *sb.last().unwrap();
        let rows = self.value(a).numel() / na;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * na..(r + 1) * na]);
            out.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), Op::Concat { a, b, rows, na, nb }, rg)
    }

    /// Picks `x[r, cols[r]]` for every row of a 2-D tensor.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != cols.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_cols",
                left: shape,
                right: vec![cols.len()],
            });
        }
        let width = shape[1];
        if let Some(&c) = cols.iter().find(|&&c| c >= width) {
            return Err(TensorError::InvalidValue {
                op: "gather_cols",
                reason: format!("column {c} out of range for width {width}"),
            });
        }
        let xv = self.value(x).data();
        let out = cols.iter().enumerate().map(|(r, &c)| xv[r * width + c]).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![cols.len()], out),
            Op::GatherCols { x, cols: cols.to_vec(), width },
            rg,
        )
    }

    /// The first `rows` entries along axis 0.
    pub fn take_rows(&mut self, x: Var, rows: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if rows == 0 || rows > shape[0] {
            return Err(TensorError::InvalidShape {
                op: "take_rows",
                shape,
                reason: format!("cannot take {rows} rows"),
            });
        }
        let stride: usize = shape[1..].iter().product();
        let out = self.value(x).data()[..rows * stride].to_vec();
        let mut new_shape = shape;
        new_shape[0] = rows;
        let rg = self.rg(x);
        self.push(Tensor::from_parts(new_shape, out), Op::TakeRows { x }, rg)
    }

    /// Propagates gradients from the scalar `loss` back to every trainable
    /// leaf. Gradients of tensors consumed several times are summed. The tape
    /// is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut result = Grads::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut contributions = self.vjp(node, &g);
            if let Some(kind) = self.fault {
                if node.op.kind() == kind {
                    for (_, t) in contributions.iter_mut() {
                        *t = t.map(|v| v * T::c(1.5));
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                result.by_var.insert(Var(i), g);
                continue;
            }
            for (v, contrib) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(result)
    }

    /// Vector-Jacobian products of one node with respect to each input.
    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(val(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul { a, b, m, k, n } => {
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                if self.rg(a) {
                    gemm_nt(gd, val(b).data(), &mut da, m, n, k);
                }
                if self.rg(b) {
                    gemm_tn(val(a).data(), gd, &mut db, k, m, n);
                }
                vec![(a, like(a, da)), (b, like(b, db))]
            }
            &Op::BatchedMatMul { a, b, batch, m, k, n, transpose_b } => {
                let (av, bv) = (val(a).data(), val(b).data());
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gb = &gd[i * m * n..(i + 1) * m * n];
                    let ab = &av[i * m * k..(i + 1) * m * k];
                    let bb = &bv[i * k * n..(i + 1) * k * n];
                    let dab = &mut da[i * m * k..(i + 1) * m * k];
                    let dbb = &mut db[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        // C = A·Bᵀ, B is [n×k]
                        gemm_nn(gb, bb, dab, m, n, k);
                        gemm_tn(gb, ab, dbb, n, m, k);
                    } else {
                        gemm_nt(gb, bb, dab, m, n, k);
                        gemm_tn(ab, gb, dbb, k, m, n);
                    }
                }
                vec![(a, like(a, da)), (b, like(b, db))]
            }
            &Op::Add { a, b } => vec![(a, g.clone()), (b, g.clone())],
            &Op::AddBroadcast { x, y } => {
                let tail = val(y).numel();
                let mut dy = vec![T::zero(); tail];
                for (i, &v) in gd.iter().enumerate() {
                    dy[i % tail] = dy[i % tail] + v;
                }
                vec![(x, g.clone()), (y, like(y, dy))]
            }
            &Op::Mul { a, b } => {
                let da = gd.iter().zip(val(b).data()).map(|(&u, &w)| u * w).collect();
                let db = gd.iter().zip(val(a).data()).map(|(&u, &w)| u * w).collect();
                vec![(a, like(a, da)), (b, like(b, db))]
            }
            &Op::Scale { x, factor } => vec![(x, g.map(|v| v * factor))],
            &Op::Gelu { x } => {
                let dx = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(&u, &xv)| u * gelu_grad(xv))
                    .collect();
                vec![(x, like(x, dx))]
            }
            &Op::Sigmoid { x } => {
                let dx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&u, &y)| u * y * (T::one() - y))
                    .collect();
                vec![(x, like(x, dx))]
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(x, like(x, dx))]
            }
            &Op::CausalMask { x, s } => {
                let dx = gd
                    .iter()
                    .enumerate()
                    .map(|(idx, &u)| if idx % s > (idx / s) % s { T::zero() } else { u })
                    .collect();
                vec![(x, like(x, dx))]
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let gv = val(gain).data();
                let n = gv.len();
                let nf = T::c(n as f64);
                let mut dx = vec![T::zero(); gd.len()];
                let mut dg = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for r in 0..gd.len() / n {
                    let gr = &gd[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..n {
                        dg[j] = dg[j] + gr[j] * hr[j];
                        dbias[j] = dbias[j] + gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                    }
                    let scale = inv_std[r] / nf;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[r * n + j] = scale * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                vec![(x, like(x, dx)), (gain, like(gain, dg)), (bias, like(bias, dbias))]
            }
            Op::Bce { p, targets } => {
                let p = *p;
                let lo = T::c(PROB_CLAMP);
                let hi = T::one() - lo;
                let scale = gd[0] / T::c(targets.len() as f64);
                let dp = val(p)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pi, &y)| {
                        if pi < lo || pi > hi {
                            T::zero()
                        } else {
                            scale * (-y / pi + (T::one() - y) / (T::one() - pi))
                        }
                    })
                    .collect();
                vec![(p, like(p, dp))]
            }
            Op::BceWithLogits { z, targets } => {
                let z = *z;
                let scale = gd[0] / T::c(targets.len() as f64);
                let dz = val(z)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &y)| scale * (sigmoid_scalar(zi) - y))
                    .collect();
                vec![(z, like(z, dz))]
            }
            &Op::Sum { x } => vec![(x, Tensor::full(val(x).shape(), gd[0]))],
            &Op::Mean { x } => {
                let n = T::c(val(x).numel() as f64);
                vec![(x, Tensor::full(val(x).shape(), gd[0] / n))]
            }
            &Op::Reshape { x } => vec![(x, like(x, gd.to_vec()))],
            &Op::SplitHeads { x, batch, seq, heads, head_dim } => {
                let dx = permute_heads(gd, batch, seq, heads, head_dim, false);
                vec![(x, like(x, dx))]
            }
            &Op::MergeHeads { x, batch, seq, heads, head_dim } => {
                let dx = permute_heads(gd, batch, seq, heads, head_dim, true);
                vec![(x, like(x, dx))]
            }
            &Op::Concat { a, b, rows, na, nb } => {
                let mut da = Vec::with_capacity(rows * na);
                let mut db = Vec::with_capacity(rows * nb);
                for r in 0..rows {
                    let row = &gd[r * (na + nb)..(r + 1) * (na + nb)];
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                vec![(a, like(a, da)), (b, like(b, db))]
            }
            Op::GatherCols { x, cols, width } => {
                let mut dx = vec![T::zero(); cols.len() * width];
                for (r, (&c, &u)) in cols.iter().zip(gd).enumerate() {
                    dx[r * width + c] = u;
                }
                vec![(*x, like(*x, dx))]
            }
            &Op::TakeRows { x } => {
                let mut dx = vec![T::zero(); val(x).numel()];
                dx[..gd.len()].copy_from_slice(gd);
                vec![(x, like(x, dx))]
            }
        }
    }
}

/// Moves data between `[B, s, H·dh]` (merged) and `[B·H, s, dh]` (split).
fn permute_heads<T: Scalar>(
    src: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
    to_split: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let width = heads * head_dim;
    for b in 0..batch {
        for i in 0..seq {
            for h in 0..heads {
                for c in 0..head_dim {
                    let merged = (b * seq + i) * width + h * head_dim + c;
                    let split = ((b * heads + h) * seq + i) * head_dim + c;
                    if to_split {
                        out[split] = src[merged];
                    } else {
                        out[merged] = src[split];
                    }
                }
            }
        }
    }
    out
}

/// Softmax over the last axis with `-inf` treated as masked.
pub fn softmax_last_axis<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(n).enumerate() {
        let max = row
            .iter()
            .copied()
            .filter(|v| *v != T::neg_infinity())
            .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))));
        let Some(max) = max else {
            return Err(TensorError::DegenerateRow { row: r });
        };
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = if *v == T::neg_infinity() {
                T::zero()
            } else {
                (*v - max).exp()
            };
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
