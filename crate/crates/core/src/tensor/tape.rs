//! Gradient tape: eager forward evaluation plus recorded operations for
//! the reverse pass.
//!
//! Every op validates shapes up front and returns a [`TensorId`] handle.
//! Nodes only reference earlier nodes, so replaying the tape in reverse
//! insertion order is a valid topological order for backpropagation.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Recorded operation with the node ids of its inputs.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    /// `[m x n] + [1 x n]`, row vector added to every row.
    AddRow { a: TensorId, row: TensorId },
    /// `[m x n] * [1 x n]`, row vector multiplied into every row.
    MulRow { a: TensorId, row: TensorId },
    /// `[m x n] * [m x 1]`, each row scaled by its own factor.
    MulCol { a: TensorId, col: TensorId },
    /// `[m x n] + [1 x 1]`, scalar broadcast over all entries.
    AddScalar { a: TensorId, s: TensorId },
    Softmax { a: TensorId, axis: usize },
    Gelu { a: TensorId },
    Sigmoid { a: TensorId },
    Abs { a: TensorId },
    /// Elementwise reciprocal with `1/0` defined as `0`.
    Recip0 { a: TensorId },
    /// Rows scaled to unit L2 norm; zero-norm rows stay zero.
    RowNormalize { a: TensorId },
    Sum { a: TensorId },
    Transpose { a: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    GatherRows { a: TensorId, idx: Vec<usize> },
    GatherCols { a: TensorId, idx: Vec<usize> },
    /// Mean over consecutive groups of `p` rows.
    MeanPoolRows { a: TensorId, p: usize },
    /// Output row k is the mean of the listed input rows (empty list
    /// yields a zero row).
    WindowPool { a: TensorId, windows: Vec<Vec<usize>> },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    /// Sum over rows of `-log softmax(logits_row)[label]`.
    CrossEntropySum { logits: TensorId, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Eager computation tape. Dropped and rebuilt every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const ROW_NORM_EPS: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Plain triple-loop matrix product used by the MatMul forward/backward.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    /// Record a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id`, if the node required one and
    /// `backward` has run.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor, inputs: &[TensorId], op: Op) -> TensorId {
        let requires = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.push(value, requires, op)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[id.0].value.dims2(op)
    }

    // ── Forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dimensions disagree: {m}x{ka} vs {kb}x{n}"),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n);
        let out = Tensor { shape: vec![m, n], data };
        Ok(self.push_from(out, &[a, b], Op::MatMul { a, b }))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        Ok(self.push_from(out, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        Ok(self.push_from(out, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        Ok(self.push_from(out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        self.push_from(out, &[a], Op::Scale { a, c })
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "add_row")?;
        let (rr, rc) = self.dims2(row, "add_row")?;
        if rr != 1 || rc != n {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("row must be 1x{n}, got {rr}x{rc}"),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let rdata = self.value(row).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rdata[j];
            }
        }
        let out = Tensor { shape: vec![m, n], data };
        Ok(self.push_from(out, &[a, row], Op::AddRow { a, row }))
    }

    pub fn mul_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "mul_row")?;
        let (rr, rc) = self.dims2(row, "mul_row")?;
        if rr != 1 || rc != n {
            return Err(Error::Shape {
                op: "mul_row",
                detail: format!("row must be 1x{n}, got {rr}x{rc}"),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let rdata = self.value(row).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= rdata[j];
            }
        }
        let out = Tensor { shape: vec![m, n], data };
        Ok(self.push_from(out, &[a, row], Op::MulRow { a, row }))
    }

    pub fn mul_col(&mut self, a: TensorId, col: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "mul_col")?;
        let (cr, cc) = self.dims2(col, "mul_col")?;
        if cr != m || cc != 1 {
            return Err(Error::Shape {
                op: "mul_col",
                detail: format!("column must be {m}x1, got {cr}x{cc}"),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let cdata = self.value(col).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= cdata[i];
            }
        }
        let out = Tensor { shape: vec![m, n], data };
        Ok(self.push_from(out, &[a, col], Op::MulCol { a, col }))
    }

    pub fn add_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "add_scalar",
                detail: format!("expected scalar, got {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| x + sv).collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        Ok(self.push_from(out, &[a, s], Op::AddScalar { a, s }))
    }

    /// Numerically stabilized softmax along `axis` of a 2-D tensor.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "softmax")?;
        if axis > 1 {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for 2-D tensor"),
            });
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        let (lanes, lane_len, stride, base) = if axis == 1 { (m, n, 1, n) } else { (n, m, n, 1) };
        for lane in 0..lanes {
            let at = |i: usize| src[lane * base + i * stride];
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(at(i));
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (at(i) - max).exp();
                data[lane * base + i * stride] = e;
                sum += e;
            }
            for i in 0..lane_len {
                data[lane * base + i * stride] /= sum;
            }
        }
        let out = Tensor { shape: vec![m, n], data };
        Ok(self.push_from(out, &[a], Op::Softmax { a, axis }))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        self.push_from(out, &[a], Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        self.push_from(out, &[a], Op::Sigmoid { a })
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        self.push_from(out, &[a], Op::Abs { a })
    }

    pub fn recip0(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x == 0.0 { 0.0 } else { 1.0 / x })
            .collect();
        let out = Tensor { shape: self.value(a).shape().to_vec(), data };
        self.push_from(out, &[a], Op::Recip0 { a })
    }

    /// Scale each row of a 2-D tensor to unit L2 norm. Rows with norm
    /// below 1e-12 are mapped to zero instead of dividing by zero.
    pub fn row_normalize(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "row_normalize")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > ROW_NORM_EPS {
                for j in 0..n {
                    data[i * n + j] = row[j] / norm;
                }
            }
        }
        let out = Tensor { shape: vec![m, n], data };
        Ok(self.push_from(out, &[a], Op::RowNormalize { a }))
    }

    /// Sum of all entries, as a `1x1` tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_from(Tensor::scalar(s), &[a], Op::Sum { a })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor { shape: vec![n, m], data };
        Ok(self.push_from(out, &[a], Op::Transpose { a }))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat_rows", detail: "no inputs".into() });
        }
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column counts disagree: {n} vs {pn}"),
                });
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor { shape: vec![rows, n], data };
        Ok(self.push_from(out, parts, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Stack 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat_cols", detail: "no inputs".into() });
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts disagree: {m} vs {pm}"),
                });
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor { shape: vec![m, total], data };
        Ok(self.push_from(out, parts, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Row lookup (embedding gather). Duplicate indices accumulate
    /// gradient into the same source row.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Shape {
                    op: "gather_rows",
                    detail: format!("row index {i} out of range for {m} rows"),
                });
            }
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor { shape: vec![idx.len(), n], data };
        Ok(self.push_from(out, &[a], Op::GatherRows { a, idx: idx.to_vec() }))
    }

    pub fn gather_cols(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "gather_cols")?;
        let src = self.value(a).data();
        let w = idx.len();
        let mut data = vec![0.0; m * w];
        for (k, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::Shape {
                    op: "gather_cols",
                    detail: format!("column index {j} out of range for {n} columns"),
                });
            }
            for i in 0..m {
                data[i * w + k] = src[i * n + j];
            }
        }
        let out = Tensor { shape: vec![m, w], data };
        Ok(self.push_from(out, &[a], Op::GatherCols { a, idx: idx.to_vec() }))
    }

    /// Mean over consecutive groups of `p` rows; requires `rows % p == 0`.
    pub fn mean_pool_rows(&mut self, a: TensorId, p: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "mean_pool_rows")?;
        if p == 0 || m % p != 0 {
            return Err(Error::Shape {
                op: "mean_pool_rows",
                detail: format!("{m} rows not divisible by group size {p}"),
            });
        }
        let src = self.value(a).data();
        let groups = m / p;
        let mut data = vec![0.0; groups * n];
        for g in 0..groups {
            for r in 0..p {
                let row = &src[(g * p + r) * n..(g * p + r + 1) * n];
                for j in 0..n {
                    data[g * n + j] += row[j];
                }
            }
            for j in 0..n {
                data[g * n + j] /= p as f64;
            }
        }
        let out = Tensor { shape: vec![groups, n], data };
        Ok(self.push_from(out, &[a], Op::MeanPoolRows { a, p }))
    }

    /// Each output row is the mean of the listed input rows; an empty
    /// window produces a zero row.
    pub fn window_pool(&mut self, a: TensorId, windows: &[Vec<usize>]) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "window_pool")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; windows.len() * n];
        for (k, window) in windows.iter().enumerate() {
            if window.is_empty() {
                continue;
            }
            for &i in window {
                if i >= m {
                    return Err(Error::Shape {
                        op: "window_pool",
                        detail: format!("row index {i} out of range for {m} rows"),
                    });
                }
                for j in 0..n {
                    data[k * n + j] += src[i * n + j];
                }
            }
            let inv = 1.0 / window.len() as f64;
            for j in 0..n {
                data[k * n + j] *= inv;
            }
        }
        let out = Tensor { shape: vec![windows.len(), n], data };
        Ok(self.push_from(out, &[a], Op::WindowPool { a, windows: windows.to_vec() }))
    }

    /// Per-row layer normalization with learnable scale and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        let (gr, gc) = self.dims2(gamma, "layer_norm")?;
        let (br, bc) = self.dims2(beta, "layer_norm")?;
        if gr != 1 || gc != n || br != 1 || bc != n {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("gamma/beta must be 1x{n}"),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        let out = Tensor { shape: vec![m, n], data };
        Ok(self.push_from(out, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Sum over rows of the negative log softmax probability of each
    /// row's label. Divide by the row count afterwards for a mean.
    pub fn cross_entropy_sum(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(logits, "cross_entropy_sum")?;
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy_sum",
                detail: format!("{m} logit rows but {} labels", labels.len()),
            });
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= n {
                return Err(Error::Shape {
                    op: "cross_entropy_sum",
                    detail: format!("label {label} out of range for {n} classes"),
                });
            }
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label];
        }
        let op = Op::CrossEntropySum { logits, labels: labels.to_vec() };
        Ok(self.push_from(Tensor::scalar(total), &[logits], op))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.value(loss).shape().to_vec() });
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(vec![0.0; node.value.numel()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss is constant w.r.t. every leaf; nothing to propagate.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_op(i, &op, &grad);
        }
        Ok(())
    }

    fn add_to_grad(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let g = self.nodes[id.0].grad.as_mut().expect("grad allocated");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn backprop_op(&mut self, out: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    // da = g . b^T
                    let bdata = self.value(*b).data();
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bdata[p * n + j];
                        }
                    }
                    let da = matmul_raw(grad, &bt, m, n, k);
                    self.add_to_grad(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // db = a^T . g
                    let adata = self.value(*a).data();
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = adata[i * k + p];
                        }
                    }
                    let db = matmul_raw(&at, grad, k, m, n);
                    self.add_to_grad(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_to_grad(*a, grad);
                self.add_to_grad(*b, grad);
            }
            Op::Sub { a, b } => {
                self.add_to_grad(*a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.add_to_grad(*b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> =
                        grad.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.add_to_grad(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> =
                        grad.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.add_to_grad(*b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.add_to_grad(*a, &da);
            }
            Op::AddRow { a, row } => {
                self.add_to_grad(*a, grad);
                if self.nodes[row.0].requires_grad {
                    let n = self.value(*row).numel();
                    let mut dr = vec![0.0; n];
                    for (i, g) in grad.iter().enumerate() {
                        dr[i % n] += g;
                    }
                    self.add_to_grad(*row, &dr);
                }
            }
            Op::MulRow { a, row } => {
                let n = self.value(*row).numel();
                if self.nodes[a.0].requires_grad {
                    let rdata = self.value(*row).data();
                    let da: Vec<f64> =
                        grad.iter().enumerate().map(|(i, g)| g * rdata[i % n]).collect();
                    self.add_to_grad(*a, &da);
                }
                if self.nodes[row.0].requires_grad {
                    let adata = self.value(*a).data();
                    let mut dr = vec![0.0; n];
                    for (i, g) in grad.iter().enumerate() {
                        dr[i % n] += g * adata[i];
                    }
                    self.add_to_grad(*row, &dr);
                }
            }
            Op::MulCol { a, col } => {
                let n = self.value(*a).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let cdata = self.value(*col).data();
                    let da: Vec<f64> =
                        grad.iter().enumerate().map(|(i, g)| g * cdata[i / n]).collect();
                    self.add_to_grad(*a, &da);
                }
                if self.nodes[col.0].requires_grad {
                    let adata = self.value(*a).data();
                    let m = self.value(*col).numel();
                    let mut dc = vec![0.0; m];
                    for (i, g) in grad.iter().enumerate() {
                        dc[i / n] += g * adata[i];
                    }
                    self.add_to_grad(*col, &dc);
                }
            }
            Op::AddScalar { a, s } => {
                self.add_to_grad(*a, grad);
                if self.nodes[s.0].requires_grad {
                    let ds = [grad.iter().sum::<f64>()];
                    self.add_to_grad(*s, &ds);
                }
            }
            Op::Softmax { a, axis } => {
                if !self.nodes[a.0].requires_grad {
                    return;
                }
                let p = self.nodes[out].value.clone();
                let (m, n) = (p.shape()[0], p.shape()[1]);
                let pd = p.data();
                let mut da = vec![0.0; m * n];
                let (lanes, lane_len, stride, base) =
                    if *axis == 1 { (m, n, 1, n) } else { (n, m, n, 1) };
                for lane in 0..lanes {
                    let mut dot = 0.0;
                    for i in 0..lane_len {
                        let idx = lane * base + i * stride;
                        dot += grad[idx] * pd[idx];
                    }
                    for i in 0..lane_len {
                        let idx = lane * base + i * stride;
                        da[idx] = pd[idx] * (grad[idx] - dot);
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * gelu_deriv(x))
                    .collect();
                self.add_to_grad(*a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[out].value.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.add_to_grad(*a, &da);
            }
            Op::Abs { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_to_grad(*a, &da);
            }
            Op::Recip0 { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[out].value.data())
                    .map(|(g, &y)| -g * y * y)
                    .collect();
                self.add_to_grad(*a, &da);
            }
            Op::RowNormalize { a } => {
                if !self.nodes[a.0].requires_grad {
                    return;
                }
                let x = self.value(*a).clone();
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let y = self.nodes[out].value.data().to_vec();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let xrow = &x.data()[i * n..(i + 1) * n];
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= ROW_NORM_EPS {
                        continue;
                    }
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &grad[i * n..(i + 1) * n];
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        da[i * n + j] = (grow[j] - yrow[j] * dot) / norm;
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::Sum { a } => {
                let g = grad[0];
                let da = vec![g; self.value(*a).numel()];
                self.add_to_grad(*a, &da);
            }
            Op::Transpose { a } => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = grad[j * m + i];
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::ConcatRows { parts } => {
                let n = self.nodes[out].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pm = self.value(p).shape()[0];
                    let slice = grad[offset * n..(offset + pm) * n].to_vec();
                    self.add_to_grad(p, &slice);
                    offset += pm;
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[out].value.shape()[0];
                let total = self.nodes[out].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&grad[i * total + offset..i * total + offset + w]);
                        }
                        self.add_to_grad(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { a, idx } => {
                if !self.nodes[a.0].requires_grad {
                    return;
                }
                let n = self.value(*a).shape()[1];
                let mut da = vec![0.0; self.value(*a).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += grad[k * n + j];
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::GatherCols { a, idx } => {
                if !self.nodes[a.0].requires_grad {
                    return;
                }
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let w = idx.len();
                let mut da = vec![0.0; m * n];
                for (k, &j) in idx.iter().enumerate() {
                    for i in 0..m {
                        da[i * n + j] += grad[i * w + k];
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::MeanPoolRows { a, p } => {
                let n = self.value(*a).shape()[1];
                let m = self.value(*a).shape()[0];
                let inv = 1.0 / *p as f64;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let g = r / p;
                    for j in 0..n {
                        da[r * n + j] = grad[g * n + j] * inv;
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::WindowPool { a, windows } => {
                if !self.nodes[a.0].requires_grad {
                    return;
                }
                let n = self.value(*a).shape()[1];
                let mut da = vec![0.0; self.value(*a).numel()];
                for (k, window) in windows.iter().enumerate() {
                    if window.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / window.len() as f64;
                    for &i in window {
                        for j in 0..n {
                            da[i * n + j] += grad[k * n + j] * inv;
                        }
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x).clone();
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let g = self.value(*gamma).data().to_vec();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &xv.data()[i * n..(i + 1) * n];
                    let grow = &grad[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let gg: Vec<f64> = grow.iter().zip(&g).map(|(gr, ga)| gr * ga).collect();
                    let mean_gg = gg.iter().sum::<f64>() / n as f64;
                    let mean_gg_xhat =
                        gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = (gg[j] - mean_gg - xhat[j] * mean_gg_xhat) * inv_std;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                self.add_to_grad(*x, &dx);
                self.add_to_grad(*gamma, &dgamma);
                self.add_to_grad(*beta, &dbeta);
            }
            Op::CrossEntropySum { logits, labels } => {
                if !self.nodes[logits.0].requires_grad {
                    return;
                }
                let lv = self.value(*logits).clone();
                let (m, n) = (lv.shape()[0], lv.shape()[1]);
                let g = grad[0];
                let mut dl = vec![0.0; m * n];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &lv.data()[i * n..(i + 1) * n];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..n {
                        let p = exps[j] / sum;
                        dl[i * n + j] = g * (p - if j == label { 1.0 } else { 0.0 });
                    }
                }
                self.add_to_grad(*logits, &dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = t.matmul(i, a).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_pick() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]));
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng(1);
        let a = crate::tensor::uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let b = crate::tensor::uniform(vec![4, 2], -1.0, 1.0, &mut r);
        // Independent naive oracle.
        let mut expected = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a.at(i, k) * b.at(k, j);
                }
            }
        }
        let mut t = Tape::new();
        let ai = t.constant(a);
        let bi = t.constant(b);
        let out = t.matmul(ai, bi).unwrap();
        for (got, want) in t.value(out).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let s = t.softmax(a, 1).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let big = t.constant(Tensor::from_rows(&[vec![1000.0, 1000.0]]));
        let s2 = t.softmax(big, 1).unwrap();
        assert_eq!(t.value(s2).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula_oracle() {
        let mut r = rng(2);
        let x = crate::tensor::uniform(vec![1, 7], -3.0, 3.0, &mut r);
        let exps: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut t = Tape::new();
        let xi = t.constant(x);
        let s = t.softmax(xi, 1).unwrap();
        for (got, e) in t.value(s).data().iter().zip(&exps) {
            assert!((got - e / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_and_sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let g = t.gelu(x);
        let s = t.sigmoid(x);
        assert_eq!(t.value(g).data()[0], 0.0);
        assert_eq!(t.value(s).data()[0], 0.5);
    }

    #[test]
    fn gelu_gradient_matches_finite_difference() {
        let x0 = 0.7;
        let h = 1e-5;
        let fd = (gelu(x0 + h) - gelu(x0 - h)) / (2.0 * h);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(x0));
        let g = t.gelu(x);
        t.backward(g).unwrap();
        let ad = t.grad(x).unwrap()[0];
        assert!((ad - fd).abs() / fd.abs() < 1e-6, "ad={ad} fd={fd}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![3, 2]));
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut r = rng(3);
        let logits = crate::tensor::uniform(vec![4, 6], -2.0, 2.0, &mut r);
        let labels = [0usize, 3, 5, 2];
        let mut expected = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..6).map(|j| logits.at(i, j)).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected += lse - row[l];
        }
        let mut t = Tape::new();
        let li = t.constant(logits);
        let ce = t.cross_entropy_sum(li, &labels).unwrap();
        assert!((t.value(ce).data()[0] - expected).abs() < 1e-10);
    }

    // Gradient checks for each op against central finite differences.
    mod grad_checks {
        use super::*;
        use crate::gradcheck::check_scalar_fn;

        #[test]
        fn op_gradients_match_finite_differences() {
            let mut r = rng(11);
            // Weighted sum downstream of each op makes the loss scalar
            // and exercises non-uniform output gradients.
            let w = crate::tensor::uniform(vec![1, 64], -1.0, 1.0, &mut r);

            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, TensorId) -> TensorId>)> = vec![
                ("gelu", Box::new(|t, x| t.gelu(x))),
                ("sigmoid", Box::new(|t, x| t.sigmoid(x))),
                ("abs", Box::new(|t, x| t.abs(x))),
                ("softmax_rows", Box::new(|t, x| t.softmax(x, 1).unwrap())),
                ("softmax_cols", Box::new(|t, x| t.softmax(x, 0).unwrap())),
                ("row_normalize", Box::new(|t, x| t.row_normalize(x).unwrap())),
                ("transpose", Box::new(|t, x| t.transpose(x).unwrap())),
                ("mean_pool", Box::new(|t, x| t.mean_pool_rows(x, 2).unwrap())),
                ("recip0", Box::new(|t, x| {
                    // Keep inputs away from the 1/0 special case.
                    let shifted = t.scale(x, 1.0);
                    let c = t.constant(Tensor::filled(vec![4, 4], 3.0));
                    let pos = t.add(shifted, c).unwrap();
                    t.recip0(pos)
                })),
                ("window_pool", Box::new(|t, x| {
                    t.window_pool(x, &[vec![0, 1], vec![2], vec![], vec![1, 2, 3]]).unwrap()
                })),
                ("scale", Box::new(|t, x| t.scale(x, -1.7))),
            ];

            for (name, build) in cases {
                let x0 = crate::tensor::uniform(vec![4, 4], -1.5, 1.5, &mut r);
                let max_rel = check_scalar_fn(&x0, |tape, x| {
                    let y = build(tape, x);
                    let shape = tape.value(y).shape().to_vec();
                    let numel = tape.value(y).numel();
                    let wt = Tensor::new(shape, w.data()[..numel].to_vec()).unwrap();
                    let wc = tape.constant(wt);
                    let weighted = tape.mul(y, wc).unwrap();
                    tape.sum(weighted)
                });
                assert!(max_rel < 1e-6, "op {name}: max rel err {max_rel}");
            }
        }

        #[test]
        fn binary_op_gradients_match_finite_differences() {
            let mut r = rng(13);
            let a0 = crate::tensor::uniform(vec![3, 4], -1.0, 1.0, &mut r);
            let b0 = crate::tensor::uniform(vec![4, 2], -1.0, 1.0, &mut r);
            let row0 = crate::tensor::uniform(vec![1, 4], 0.5, 1.5, &mut r);
            let col0 = crate::tensor::uniform(vec![3, 1], 0.5, 1.5, &mut r);

            // matmul: check both arguments.
            let max = crate::gradcheck::check_two_arg(&a0, &b0, |t, a, b| {
                let y = t.matmul(a, b).unwrap();
                t.sum(y)
            });
            assert!(max < 1e-6, "matmul rel err {max}");

            let max = crate::gradcheck::check_two_arg(&a0, &row0, |t, a, row| {
                let y = t.mul_row(a, row).unwrap();
                let z = t.gelu(y);
                t.sum(z)
            });
            assert!(max < 1e-6, "mul_row rel err {max}");

            let max = crate::gradcheck::check_two_arg(&a0, &col0, |t, a, col| {
                let y = t.mul_col(a, col).unwrap();
                let z = t.sigmoid(y);
                t.sum(z)
            });
            assert!(max < 1e-6, "mul_col rel err {max}");

            let max = crate::gradcheck::check_two_arg(&a0, &row0, |t, a, row| {
                let y = t.add_row(a, row).unwrap();
                let z = t.gelu(y);
                t.sum(z)
            });
            assert!(max < 1e-6, "add_row rel err {max}");
        }

        #[test]
        fn layer_norm_gradient_matches_finite_differences() {
            let mut r = rng(17);
            let x0 = crate::tensor::uniform(vec![3, 5], -1.0, 1.0, &mut r);
            let g0 = crate::tensor::uniform(vec![1, 5], 0.5, 1.5, &mut r);
            let b0 = crate::tensor::uniform(vec![1, 5], -0.5, 0.5, &mut r);
            let weights = crate::tensor::uniform(vec![3, 5], -1.0, 1.0, &mut r);

            let build = |t: &mut Tape, x: TensorId, g: TensorId, b: TensorId| {
                let y = t.layer_norm(x, g, b, 1e-12).unwrap();
                let w = t.constant(weights.clone());
                let z = t.mul(y, w).unwrap();
                t.sum(z)
            };
            let max = crate::gradcheck::check_three_arg(&x0, &g0, &b0, build);
            assert!(max < 1e-6, "layer_norm rel err {max}");
        }

        #[test]
        fn cross_entropy_gradient_matches_finite_differences() {
            let mut r = rng(19);
            let x0 = crate::tensor::uniform(vec![3, 7], -2.0, 2.0, &mut r);
            let labels = vec![2usize, 0, 6];
            let max = check_scalar_fn(&x0, |t, x| t.cross_entropy_sum(x, &labels).unwrap());
            assert!(max < 1e-6, "cross_entropy rel err {max}");
        }

        #[test]
        fn gather_and_concat_gradients_match_finite_differences() {
            let mut r = rng(23);
            let x0 = crate::tensor::uniform(vec![4, 3], -1.0, 1.0, &mut r);
            // Duplicate index on purpose: gradients must accumulate.
            let max = check_scalar_fn(&x0, |t, x| {
                let g = t.gather_rows(x, &[0, 2, 2, 1]).unwrap();
                let h = t.gather_cols(g, &[1, 1, 0]).unwrap();
                let c = t.concat_rows(&[h, h]).unwrap();
                let c2 = t.concat_cols(&[c, c]).unwrap();
                let act = t.gelu(c2);
                t.sum(act)
            });
            assert!(max < 1e-6, "gather/concat rel err {max}");
        }
    }
}
