//! Dense tensor arithmetic on a reverse-mode tape.
//!
//! Every operation evaluates eagerly in f64, records itself on the owning
//! [`Graph`], and checks its output for non-finite values (a contract
//! violation, surfaced as [`Error::NonFinite`]). `backward` replays the tape
//! in reverse to accumulate gradients for every leaf that requires them.
//!
//! Evaluation is single-threaded per graph; distinct graphs are independent
//! and may live on distinct threads.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Additive pre-softmax mask constant for blocked positions.
///
/// exp(x + NEG_MASK - rowmax) underflows to exactly 0.0 for any activation
/// magnitude this crate produces, so blocked columns contribute zero
/// probability bit-exactly.
pub const NEG_MASK: f64 = -1e9;

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    /// rows of `a` plus broadcast row vector `b`
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// elementwise a / b; b may be a 1-element scalar
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    Gelu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Sqrt(TensorId),
    /// row-wise softmax; any additive mask was applied in forward and is
    /// constant, so masked entries carry exactly zero probability and grad
    Softmax(TensorId),
    LogSoftmax(TensorId),
    /// last-axis layer norm with affine params gamma, beta
    LayerNorm(TensorId, TensorId, TensorId),
    MeanAll(TensorId),
    SumAll(TensorId),
    /// column means of a 2-D tensor
    MeanRows(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceRows(TensorId, usize, usize),
    SliceCols(TensorId, usize, usize),
    /// embedding-style row lookup; indices are constants
    GatherRows(TensorId, Arc<Vec<usize>>),
    /// pick individual (row, col) entries of a 2-D tensor into a vector
    GatherEntries(TensorId, Arc<Vec<(usize, usize)>>),
    /// pack scalar nodes into a 1-D tensor
    StackScalars(Vec<TensorId>),
    Reshape(TensorId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Evaluation tape. Create one per forward pass; drop it to free all values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("expected rank <= 2, got {shape:?}"),
    }
}

fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, rg: bool) -> Result<TensorId> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{:?}", OpName(&op)),
            });
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad: rg,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { op, detail }
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Constant leaf; excluded from gradient propagation.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Self::shape_err(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        self.push(Op::Leaf, shape.to_vec(), data, false)
    }

    /// Leaf that participates in the backward pass when `requires_grad`.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Self::shape_err(
                "leaf",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        self.push(Op::Leaf, shape.to_vec(), data, requires_grad)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.constant(vec![v], &[1])
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = dims2(self.shape(a));
        let (kb, n) = dims2(self.shape(b));
        if ka != kb {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        raw_matmul(self.value(a), self.value(b), m, ka, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul(a, b), vec![m, n], out, rg)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), vec![n, m], out, rg)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(op, shape, out, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division. `b` may also be a single-element scalar, which
    /// divides every entry of `a`.
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(b).len() == 1 {
            let s = self.value(b)[0];
            let out: Vec<f64> = self.value(a).iter().map(|&x| x / s).collect();
            let shape = self.shape(a).to_vec();
            let rg = self.rg(a) || self.rg(b);
            return self.push(Op::Div(a, b), shape, out, rg);
        }
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Add a broadcast row vector (bias) to every row of a 2-D tensor.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        if self.value(bias).len() != n {
            return Err(Self::shape_err(
                "add_row",
                format!("{:?} + bias {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let bv = self.value(bias);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.value(a)[i * n..(i + 1) * n];
            out.extend(row.iter().zip(bv).map(|(&x, &b)| x + b));
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddRow(a, bias), vec![m, n], out, rg)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), shape, out, rg)
    }

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(op, shape, out, rg)
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, gelu_tanh, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Row-wise softmax of a 2-D tensor, with an optional additive mask
    /// applied before normalization. The mask is a constant: blocked entries
    /// carry [`NEG_MASK`] and receive exactly zero probability.
    pub fn softmax_masked(
        &mut self,
        a: TensorId,
        mask: Option<Arc<Vec<f64>>>,
    ) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(Self::shape_err(
                    "softmax",
                    format!("mask len {} vs {:?}", mk.len(), self.shape(a)),
                ));
            }
        }
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let masked: Vec<f64> = match &mask {
                Some(mk) => row
                    .iter()
                    .zip(&mk[i * n..(i + 1) * n])
                    .map(|(&x, &a)| x + a)
                    .collect(),
                None => row.to_vec(),
            };
            let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let e = (masked[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Softmax(a), shape, out, rg)
    }

    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        self.softmax_masked(a, None)
    }

    /// Row-wise log-softmax (numerically stable).
    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), shape, out, rg)
    }

    /// Layer norm over the last axis with affine parameters.
    /// A constant row normalizes to zero before the affine map (LN_EPS guard).
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Self::shape_err(
                "layer_norm",
                format!(
                    "{:?} with gamma {:?}, beta {:?}",
                    self.shape(a),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let v = self.value(a);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.push(Op::LayerNorm(a, gamma, beta), shape, out, rg)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).len();
        let v = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), vec![1], vec![v], rg)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), vec![1], vec![v], rg)
    }

    /// Mean over rows of a 2-D tensor, producing a 1-D vector of column means.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        let v = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += v[i * n + j];
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), vec![n], out, rg)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_rows", "empty part list".into()));
        }
        let (_, n0) = dims2(self.shape(parts[0]));
        let mut rows = 0;
        for &p in parts {
            let (m, n) = dims2(self.shape(p));
            if n != n0 {
                return Err(Self::shape_err(
                    "concat_rows",
                    format!("column counts differ: {n0} vs {n}"),
                ));
            }
            rows += m;
        }
        let mut out = Vec::with_capacity(rows * n0);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), vec![rows, n0], out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", "empty part list".into()));
        }
        let (m0, _) = dims2(self.shape(parts[0]));
        let mut cols = 0;
        for &p in parts {
            let (m, n) = dims2(self.shape(p));
            if m != m0 {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("row counts differ: {m0} vs {m}"),
                ));
            }
            cols += n;
        }
        let mut out = vec![0.0; m0 * cols];
        let mut off = 0;
        for &p in parts {
            let (_, n) = dims2(self.shape(p));
            let v = self.value(p);
            for i in 0..m0 {
                out[i * cols + off..i * cols + off + n].copy_from_slice(&v[i * n..(i + 1) * n]);
            }
            off += n;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), vec![m0, cols], out, rg)
    }

    /// Rows `r0..r1` (half-open) of a 2-D tensor.
    pub fn slice_rows(&mut self, a: TensorId, r0: usize, r1: usize) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        if r0 > r1 || r1 > m {
            return Err(Self::shape_err(
                "slice_rows",
                format!("[{r0}, {r1}) of {m} rows"),
            ));
        }
        let out = self.value(a)[r0 * n..r1 * n].to_vec();
        let rg = self.rg(a);
        self.push(Op::SliceRows(a, r0, r1), vec![r1 - r0, n], out, rg)
    }

    /// Columns `c0..c1` (half-open) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, c0: usize, c1: usize) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        if c0 > c1 || c1 > n {
            return Err(Self::shape_err(
                "slice_cols",
                format!("[{c0}, {c1}) of {n} cols"),
            ));
        }
        let w = c1 - c0;
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + c0..i * n + c1]);
        }
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, c0, c1), vec![m, w], out, rg)
    }

    /// Row lookup by constant indices (embedding-table style).
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(table));
        for &ix in indices {
            if ix >= m {
                return Err(Error::UnknownToken(ix, m));
            }
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &ix in indices {
            out.extend_from_slice(&v[ix * n..(ix + 1) * n]);
        }
        let rg = self.rg(table);
        self.push(
            Op::GatherRows(table, Arc::new(indices.to_vec())),
            vec![indices.len(), n],
            out,
            rg,
        )
    }

    /// Pick individual `(row, col)` entries of a 2-D tensor into a vector.
    pub fn gather_entries(&mut self, a: TensorId, entries: &[(usize, usize)]) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        for &(r, c) in entries {
            if r >= m || c >= n {
                return Err(Self::shape_err(
                    "gather_entries",
                    format!("({r}, {c}) outside {m}x{n}"),
                ));
            }
        }
        let v = self.value(a);
        let out: Vec<f64> = entries.iter().map(|&(r, c)| v[r * n + c]).collect();
        let rg = self.rg(a);
        self.push(
            Op::GatherEntries(a, Arc::new(entries.to_vec())),
            vec![entries.len()],
            out,
            rg,
        )
    }

    /// Pack scalar nodes into a 1-D tensor.
    pub fn stack_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).len() != 1 {
                return Err(Self::shape_err(
                    "stack_scalars",
                    format!("non-scalar input of shape {:?}", self.shape(p)),
                ));
            }
            out.push(self.value(p)[0]);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::StackScalars(parts.to_vec()), vec![parts.len()], out, rg)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.value(a).len() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Reshape(a), shape.to_vec(), out, rg)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// `None` for nodes that do not require gradients or sit off the path.
    pub fn backward(&self, loss: TensorId) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::LossNotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient slot for `id` out of a `backward` result.
    pub fn grad<'a>(&self, grads: &'a [Option<Vec<f64>>], id: TensorId) -> Option<&'a [f64]> {
        grads[id.0].as_deref()
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let (_, n) = dims2(self.shape(*b));
                if self.rg(*a) {
                    // dA = dC @ B^T
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.add_grad(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = A^T @ dC
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.shape(*a));
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::AddRow(a, bias) => {
                self.add_grad(grads, *a, g);
                if self.rg(*bias) {
                    let (m, n) = dims2(&node.shape);
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    self.add_grad(grads, *bias, &db);
                }
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g);
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                    self.add_grad(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(&x, &y)| x * y).collect();
                    self.add_grad(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(&x, &y)| x * y).collect();
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if bv.len() == 1 {
                    let s = bv[0];
                    if self.rg(*a) {
                        let da: Vec<f64> = g.iter().map(|&x| x / s).collect();
                        self.add_grad(grads, *a, &da);
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let ds = -g
                            .iter()
                            .zip(av)
                            .map(|(&gi, &ai)| gi * ai)
                            .sum::<f64>()
                            / (s * s);
                        self.add_grad(grads, *b, &[ds]);
                    }
                } else {
                    if self.rg(*a) {
                        let da: Vec<f64> = g.iter().zip(bv).map(|(&x, &y)| x / y).collect();
                        self.add_grad(grads, *a, &da);
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let db: Vec<f64> = g
                            .iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                            .collect();
                        self.add_grad(grads, *b, &db);
                    }
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|&x| x * c).collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&gi, &x)| gi * gelu_tanh_deriv(x))
                    .collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g.iter().zip(&node.value).map(|(&gi, &y)| gi * y).collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&gi, &x)| gi / x)
                    .collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gi, &y)| gi * 0.5 / y)
                    .collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let (m, n) = dims2(&node.shape);
                let y = &node.value;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::LogSoftmax(a) => {
                let (m, n) = dims2(&node.shape);
                let y = &node.value;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        da[i * n + j] = grow[j] - yrow[j].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::LayerNorm(a, gamma, beta) => {
                let (m, n) = dims2(&node.shape);
                let x = self.value(*a);
                let gm = self.value(*gamma);
                let mut da = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &x[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(gm).map(|(&gi, &gmj)| gi * gmj).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / n as f64;
                    for j in 0..n {
                        da[i * n + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                self.add_grad(grads, *a, &da);
                self.add_grad(grads, *gamma, &dgamma);
                self.add_grad(grads, *beta, &dbeta);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let da = vec![g[0] / n as f64; n];
                self.add_grad(grads, *a, &da);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                let da = vec![g[0]; n];
                self.add_grad(grads, *a, &da);
            }
            Op::MeanRows(a) => {
                let (m, n) = dims2(self.shape(*a));
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / m as f64;
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.add_grad(grads, p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, cols) = dims2(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let (_, n) = dims2(self.shape(p));
                    if self.rg(p) {
                        let mut dp = vec![0.0; m * n];
                        for i in 0..m {
                            dp[i * n..(i + 1) * n]
                                .copy_from_slice(&g[i * cols + off..i * cols + off + n]);
                        }
                        self.add_grad(grads, p, &dp);
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, r0, _r1) => {
                let (m, n) = dims2(self.shape(*a));
                let mut da = vec![0.0; m * n];
                da[r0 * n..r0 * n + g.len()].copy_from_slice(g);
                self.add_grad(grads, *a, &da);
            }
            Op::SliceCols(a, c0, c1) => {
                let (m, n) = dims2(self.shape(*a));
                let w = c1 - c0;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + c0..i * n + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.add_grad(grads, *a, &da);
            }
            Op::GatherRows(table, indices) => {
                let (m, n) = dims2(self.shape(*table));
                let mut dt = vec![0.0; m * n];
                for (k, &ix) in indices.iter().enumerate() {
                    for j in 0..n {
                        dt[ix * n + j] += g[k * n + j];
                    }
                }
                self.add_grad(grads, *table, &dt);
            }
            Op::GatherEntries(a, entries) => {
                let (m, n) = dims2(self.shape(*a));
                let mut da = vec![0.0; m * n];
                for (k, &(r, c)) in entries.iter().enumerate() {
                    da[r * n + c] += g[k];
                }
                self.add_grad(grads, *a, &da);
            }
            Op::StackScalars(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    self.add_grad(grads, p, &g[k..k + 1]);
                }
            }
            Op::Reshape(a) => {
                self.add_grad(grads, *a, g);
            }
        }
    }
}

struct OpName<'a>(&'a Op);

impl std::fmt::Debug for OpName<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.0 {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::MeanAll(..) => "mean_all",
            Op::SumAll(..) => "sum_all",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherEntries(..) => "gather_entries",
            Op::StackScalars(..) => "stack_scalars",
            Op::Reshape(..) => "reshape",
        };
        f.write_str(name)
    }
}
