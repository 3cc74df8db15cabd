//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Graph`] records every operation as a node holding its forward values;
//! [`Var`] is a copyable handle into the tape. The graph is define-by-run:
//! each training step builds a fresh graph, runs [`Graph::backward`] once,
//! reads gradients off the leaves, and drops the whole tape. Backward walks
//! nodes in exact reverse insertion order, which is a valid topological order
//! because inputs always precede their consumers, and accumulates (`+=`) into
//! gradient buffers so fan-out falls out naturally.
//!
//! Everything is `f64`. Shapes are validated when an op is recorded and
//! errors name the offending shapes, so a dimension bug surfaces at the call
//! site instead of as a scrambled matmul.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::Tensor;

/// Errors raised while recording ops or running backward.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    BadIndex { op: &'static str, index: usize, len: usize },
    #[error("{op}: range {start}..{end} out of bounds for axis of length {len}")]
    BadRange { op: &'static str, start: usize, end: usize, len: usize },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("{op}: variable does not belong to this graph")]
    ForeignVar { op: &'static str },
    #[error("gradient check produced a non-finite loss at parameter {param}, coordinate {coord}")]
    NonFiniteProbe { param: usize, coord: usize },
}

/// Sign-preserving guard added to denominators in [`Graph::div`].
pub const DIV_EPSILON: f64 = 1e-12;

/// Handle to a node on one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Pointwise nonlinearity selector for [`Graph::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// Binary elementwise op selector for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    /// Stored with flattened dims so vector/matrix cases share one kernel.
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Activation { x: Var, kind: Activation },
    Sqrt { x: Var },
    Elementwise { a: Var, b: Var, kind: BinaryKind },
    Scale { x: Var, c: f64 },
    AddBias { x: Var, bias: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    ReduceMean { xs: Vec<Var> },
    Sum { x: Var },
    SumSq { x: Var },
    RowSum { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    /// `lse[i]` caches the row-wise log-sum-exp from the forward pass.
    CrossEntropyRows { logits: Var, labels: Vec<usize>, lse: Vec<f64> },
    /// `coef` is a row-major `r x r` matrix of pairwise gradient
    /// coefficients accumulated over active triples; `active` counts them.
    TripletBatchAll { feats: Var, coef: Vec<f64>, active: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Allocated only when `requires_grad`; same length as `values`.
    grad: Vec<f64>,
    requires_grad: bool,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only computation tape.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        let grad = if requires_grad { vec![0.0; values.len()] } else { Vec::new() };
        self.nodes.push(Node { op, shape, values, grad, requires_grad });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn check_var(&self, op: &'static str, v: Var) -> Result<(), AutodiffError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar { op });
        }
        Ok(())
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable used on the wrong graph");
        &self.nodes[v.index]
    }

    // ---- leaves and accessors -------------------------------------------

    /// Records a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), requires_grad)
    }

    /// Records a non-differentiable constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Records a constant scalar leaf.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    /// Records a constant all-zero leaf of the given shape.
    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let numel = shape.iter().product();
        self.push(Op::Leaf, shape, vec![0.0; numel], false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    /// Forward value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.values.len(), 1, "scalar_value on shape {:?}", n.shape);
        n.values[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.values.clone())
    }

    /// Accumulated gradient, `None` for nodes that do not require grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let n = self.node(v);
        if n.requires_grad {
            Some(&n.grad)
        } else {
            None
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Clears every gradient buffer in place.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            for g in node.grad.iter_mut() {
                *g = 0.0;
            }
        }
    }

    fn requires_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    // ---- ops -------------------------------------------------------------

    /// Matrix product. Supported shapes: `[m,k]x[k,n] -> [m,n]`,
    /// `[m,k]x[k] -> [m]`, and `[k]x[k,n] -> [n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check_var("matmul", a)?;
        self.check_var("matmul", b)?;
        let (sa, sb) = (self.nodes[a.index].shape.clone(), self.nodes[b.index].shape.clone());
        let mismatch = || AutodiffError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            _ => return Err(mismatch()),
        };
        let av = &self.nodes[a.index].values;
        let bv = &self.nodes[b.index].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let x = av[i * k + kk];
                if x != 0.0 {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, out_shape, out, rg))
    }

    /// Pointwise nonlinearity.
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, AutodiffError> {
        self.check_var("activation", x)?;
        let xs = &self.nodes[x.index];
        let values: Vec<f64> = match kind {
            Activation::Sigmoid => xs.values.iter().map(|&v| stable_sigmoid(v)).collect(),
            Activation::Relu => xs.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        let shape = xs.shape.clone();
        let rg = xs.requires_grad;
        Ok(self.push(Op::Activation { x, kind }, shape, values, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::Relu)
    }

    /// Elementwise square root; negative inputs clamp to zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_var("sqrt", x)?;
        let xs = &self.nodes[x.index];
        let values: Vec<f64> = xs.values.iter().map(|&v| if v > 0.0 { v.sqrt() } else { 0.0 }).collect();
        let shape = xs.shape.clone();
        let rg = xs.requires_grad;
        Ok(self.push(Op::Sqrt { x }, shape, values, rg))
    }

    /// Binary elementwise op. Operands must share a shape, or either side may
    /// be a single-element tensor which broadcasts against the other.
    /// Division clamps near-zero denominators to a sign-preserving
    /// [`DIV_EPSILON`], so a zero denominator yields a large finite value
    /// rather than infinity while healthy denominators divide exactly.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var, AutodiffError> {
        self.check_var("elementwise", a)?;
        self.check_var("elementwise", b)?;
        let (an, bn) = (&self.nodes[a.index], &self.nodes[b.index]);
        let (alen, blen) = (an.values.len(), bn.values.len());
        let same = an.shape == bn.shape;
        if !same && alen != 1 && blen != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "elementwise",
                lhs: an.shape.clone(),
                rhs: bn.shape.clone(),
            });
        }
        let len = alen.max(blen);
        let shape = if alen >= blen { an.shape.clone() } else { bn.shape.clone() };
        let mut out = vec![0.0; len];
        for (i, o) in out.iter_mut().enumerate() {
            let x = an.values[if alen == 1 { 0 } else { i }];
            let y = bn.values[if blen == 1 { 0 } else { i }];
            *o = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / guard_denominator(y),
            };
        }
        let rg = self.requires_any(&[a, b]);
        Ok(self.push(Op::Elementwise { a, b, kind }, shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, BinaryKind::Div)
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        self.check_var("scale", x)?;
        if !c.is_finite() {
            return Err(AutodiffError::InvalidArg { op: "scale", msg: format!("non-finite factor {c}") });
        }
        let xs = &self.nodes[x.index];
        let values: Vec<f64> = xs.values.iter().map(|&v| c * v).collect();
        let shape = xs.shape.clone();
        let rg = xs.requires_grad;
        Ok(self.push(Op::Scale { x, c }, shape, values, rg))
    }

    /// Adds a length-`d` bias vector to every row of an `[n, d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        self.check_var("add_bias", x)?;
        self.check_var("add_bias", bias)?;
        let (xn, bn) = (&self.nodes[x.index], &self.nodes[bias.index]);
        if xn.shape.len() != 2 || bn.shape.len() != 1 || xn.shape[1] != bn.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: xn.shape.clone(),
                rhs: bn.shape.clone(),
            });
        }
        let (n, d) = (xn.shape[0], xn.shape[1]);
        let mut out = xn.values.clone();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += bn.values[j];
            }
        }
        let shape = xn.shape.clone();
        let rg = self.requires_any(&[x, bias]);
        Ok(self.push(Op::AddBias { x, bias }, shape, out, rg))
    }

    /// Concatenation along `axis`. Axis 0 accepts rank-1 or rank-2 inputs;
    /// axis 1 requires rank-2 inputs with equal row counts.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        if xs.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "concat" });
        }
        for &v in xs {
            self.check_var("concat", v)?;
        }
        let first = self.nodes[xs[0].index].shape.clone();
        let rank = first.len();
        if rank == 0 || axis >= rank {
            return Err(AutodiffError::BadAxis { op: "concat", axis, shape: first });
        }
        for &v in &xs[1..] {
            let s = &self.nodes[v.index].shape;
            let compatible = s.len() == rank
                && s.iter().enumerate().all(|(ax, &dim)| ax == axis || dim == first[ax]);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: first, rhs: s.clone() });
            }
        }
        let total: usize = xs.iter().map(|&v| self.nodes[v.index].shape[axis]).sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        if axis == 0 {
            let mut at = 0;
            for &v in xs {
                let vals = &self.nodes[v.index].values;
                out[at..at + vals.len()].copy_from_slice(vals);
                at += vals.len();
            }
        } else {
            let rows = shape[0];
            let out_cols = shape[1];
            let mut col_at = 0;
            for &v in xs {
                let node = &self.nodes[v.index];
                let cols = node.shape[1];
                for i in 0..rows {
                    out[i * out_cols + col_at..i * out_cols + col_at + cols]
                        .copy_from_slice(&node.values[i * cols..(i + 1) * cols]);
                }
                col_at += cols;
            }
        }
        let rg = self.requires_any(xs);
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, shape, out, rg))
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        self.check_var("slice", x)?;
        let xs = &self.nodes[x.index];
        let rank = xs.shape.len();
        if rank == 0 || axis >= rank {
            return Err(AutodiffError::BadAxis { op: "slice", axis, shape: xs.shape.clone() });
        }
        let dim = xs.shape[axis];
        if len == 0 || start + len > dim {
            return Err(AutodiffError::BadRange { op: "slice", start, end: start + len, len: dim });
        }
        let mut shape = xs.shape.clone();
        shape[axis] = len;
        let out = if axis == 0 {
            let row: usize = xs.shape[1..].iter().product();
            xs.values[start * row..(start + len) * row].to_vec()
        } else {
            let rows = xs.shape[0];
            let cols = xs.shape[1];
            let mut out = vec![0.0; rows * len];
            for i in 0..rows {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&xs.values[i * cols + start..i * cols + start + len]);
            }
            out
        };
        let rg = xs.requires_grad;
        Ok(self.push(Op::Slice { x, axis, start, len }, shape, out, rg))
    }

    /// Elementwise mean over a non-empty list of same-shape tensors.
    pub fn reduce_mean(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        if xs.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "reduce_mean" });
        }
        for &v in xs {
            self.check_var("reduce_mean", v)?;
        }
        let shape = self.nodes[xs[0].index].shape.clone();
        for &v in &xs[1..] {
            if self.nodes[v.index].shape != shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: "reduce_mean",
                    lhs: shape,
                    rhs: self.nodes[v.index].shape.clone(),
                });
            }
        }
        let inv = 1.0 / xs.len() as f64;
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        for &v in xs {
            for (o, &x) in out.iter_mut().zip(&self.nodes[v.index].values) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let rg = self.requires_any(xs);
        Ok(self.push(Op::ReduceMean { xs: xs.to_vec() }, shape, out, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_var("sum", x)?;
        let xs = &self.nodes[x.index];
        let total: f64 = xs.values.iter().sum();
        let rg = xs.requires_grad;
        Ok(self.push(Op::Sum { x }, vec![], vec![total], rg))
    }

    /// Sum of squared elements, as a scalar.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_var("sum_sq", x)?;
        let xs = &self.nodes[x.index];
        let total: f64 = xs.values.iter().map(|&v| v * v).sum();
        let rg = xs.requires_grad;
        Ok(self.push(Op::SumSq { x }, vec![], vec![total], rg))
    }

    /// Per-row sum of an `[n, d]` matrix, yielding `[n]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_var("row_sum", x)?;
        let xs = &self.nodes[x.index];
        if xs.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch { op: "row_sum", lhs: xs.shape.clone(), rhs: vec![0, 0] });
        }
        let (n, d) = (xs.shape[0], xs.shape[1]);
        let out: Vec<f64> = (0..n).map(|i| xs.values[i * d..(i + 1) * d].iter().sum()).collect();
        let rg = xs.requires_grad;
        Ok(self.push(Op::RowSum { x }, vec![n], out, rg))
    }

    /// Row lookup into an `[r, d]` matrix; repeated indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        self.check_var("gather_rows", x)?;
        if idx.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "gather_rows" });
        }
        let xs = &self.nodes[x.index];
        if xs.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch { op: "gather_rows", lhs: xs.shape.clone(), rhs: vec![0, 0] });
        }
        let (r, d) = (xs.shape[0], xs.shape[1]);
        for &i in idx {
            if i >= r {
                return Err(AutodiffError::BadIndex { op: "gather_rows", index: i, len: r });
            }
        }
        let mut out = vec![0.0; idx.len() * d];
        for (row, &i) in idx.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&xs.values[i * d..(i + 1) * d]);
        }
        let rg = xs.requires_grad;
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, vec![idx.len(), d], out, rg))
    }

    /// Mean binary cross-entropy between logits and `{0,1}` targets, computed
    /// in the numerically stable form
    /// `max(x,0) - x*y + ln(1 + exp(-|x|))`. Logits may have any shape; they
    /// are read in row-major order and must match `targets` in length.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, AutodiffError> {
        self.check_var("bce_with_logits", logits)?;
        let ln = &self.nodes[logits.index];
        if targets.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "bce_with_logits" });
        }
        if ln.values.len() != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: ln.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let total: f64 = ln
            .values
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = ln.requires_grad;
        Ok(self.push(
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            vec![],
            vec![total / n],
            rg,
        ))
    }

    /// Mean softmax cross-entropy over the rows of an `[n, k]` logit matrix
    /// against integer labels in `0..k`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        self.check_var("cross_entropy_rows", logits)?;
        let ln = &self.nodes[logits.index];
        if ln.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: ln.shape.clone(),
                rhs: vec![labels.len(), 0],
            });
        }
        let (n, k) = (ln.shape[0], ln.shape[1]);
        if n != labels.len() || n == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: ln.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= k {
                return Err(AutodiffError::BadIndex { op: "cross_entropy_rows", index: l, len: k });
            }
        }
        let mut lse = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            let row = &ln.values[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            lse[i] = m + s.ln();
            total += lse[i] - row[labels[i]];
        }
        let rg = ln.requires_grad;
        Ok(self.push(
            Op::CrossEntropyRows { logits, labels: labels.to_vec(), lse },
            vec![],
            vec![total / n as f64],
            rg,
        ))
    }

    /// Batch-all triplet loss with squared Euclidean distances over the rows
    /// of an `[r, d]` feature matrix. Every ordered (anchor, positive,
    /// negative) triple with `label[a] == label[p]`, `a != p`, and
    /// `label[a] != label[n]` contributes `max(0, d_ap - d_an + margin)`;
    /// the result is the mean over triples with a strictly positive hinge,
    /// or exactly zero when no triple is active.
    pub fn triplet_batch_all(
        &mut self,
        feats: Var,
        labels: &[u64],
        margin: f64,
    ) -> Result<Var, AutodiffError> {
        self.check_var("triplet_batch_all", feats)?;
        if !(margin.is_finite() && margin >= 0.0) {
            return Err(AutodiffError::InvalidArg {
                op: "triplet_batch_all",
                msg: format!("margin must be finite and >= 0, got {margin}"),
            });
        }
        let fnode = &self.nodes[feats.index];
        if fnode.shape.len() != 2 || fnode.shape[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "triplet_batch_all",
                lhs: fnode.shape.clone(),
                rhs: vec![labels.len(), 0],
            });
        }
        let (r, d) = (fnode.shape[0], fnode.shape[1]);
        let f = &fnode.values;
        let mut dist = vec![0.0; r * r];
        for i in 0..r {
            for j in (i + 1)..r {
                let mut s = 0.0;
                for c in 0..d {
                    let diff = f[i * d + c] - f[j * d + c];
                    s += diff * diff;
                }
                dist[i * r + j] = s;
                dist[j * r + i] = s;
            }
        }
        let mut coef = vec![0.0; r * r];
        let mut total = 0.0;
        let mut active = 0usize;
        for a in 0..r {
            for p in 0..r {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                let d_ap = dist[a * r + p];
                for nn in 0..r {
                    if labels[nn] == labels[a] {
                        continue;
                    }
                    let hinge = d_ap - dist[a * r + nn] + margin;
                    if hinge > 0.0 {
                        total += hinge;
                        active += 1;
                        coef[a * r + p] += 2.0;
                        coef[a * r + nn] -= 2.0;
                        coef[p * r + a] += 2.0;
                        coef[nn * r + a] -= 2.0;
                    }
                }
            }
        }
        let value = if active > 0 { total / active as f64 } else { 0.0 };
        let rg = fnode.requires_grad;
        Ok(self.push(Op::TripletBatchAll { feats, coef, active }, vec![], vec![value], rg))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar `loss` node. Seeds `d(loss)/d(loss) += 1`
    /// and accumulates into gradient buffers in exact reverse insertion
    /// order; call [`Graph::zero_grads`] between repeated passes.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        self.check_var("backward", loss)?;
        if self.nodes[loss.index].values.len() != 1 {
            return Err(AutodiffError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.index].shape.clone(),
            });
        }
        if !self.nodes[loss.index].requires_grad {
            // Constant loss: nothing upstream is differentiable.
            return Ok(());
        }
        self.nodes[loss.index].grad[0] += 1.0;
        for i in (0..=loss.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            backprop_node(head, node);
        }
        Ok(())
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn guard_denominator(b: f64) -> f64 {
    if b.abs() >= DIV_EPSILON {
        b
    } else if b >= 0.0 {
        DIV_EPSILON
    } else {
        -DIV_EPSILON
    }
}

/// Propagates `node`'s accumulated gradient into its inputs, all of which
/// live in `head` (strictly earlier on the tape).
///
/// Indexed loops are kept where one index addresses several buffers at
/// different offsets; iterator chains would obscure the adjoint algebra.
#[allow(clippy::needless_range_loop)]
fn backprop_node(head: &mut [Node], node: &Node) {
    let dy = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            // Accumulate into scratch buffers first; `a` and `b` may alias.
            let (m, k, n) = (*m, *k, *n);
            if head[a.index].requires_grad {
                let bvals = &head[b.index].values;
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let dyrow = &dy[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &bvals[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += dyrow[j] * brow[j];
                        }
                        da[i * k + kk] = acc;
                    }
                }
                let ga = &mut head[a.index].grad;
                for (g, d) in ga.iter_mut().zip(&da) {
                    *g += d;
                }
            }
            if head[b.index].requires_grad {
                let avals = &head[a.index].values;
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let dyrow = &dy[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let x = avals[i * k + kk];
                        if x != 0.0 {
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                dbrow[j] += x * dyrow[j];
                            }
                        }
                    }
                }
                let gb = &mut head[b.index].grad;
                for (g, d) in gb.iter_mut().zip(&db) {
                    *g += d;
                }
            }
        }
        Op::Activation { x, kind } => {
            if head[x.index].requires_grad {
                match kind {
                    Activation::Sigmoid => {
                        let y = &node.values;
                        let g = &mut head[x.index].grad;
                        for i in 0..y.len() {
                            g[i] += dy[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                    Activation::Relu => {
                        let slot = &mut head[x.index];
                        for i in 0..slot.values.len() {
                            if slot.values[i] > 0.0 {
                                slot.grad[i] += dy[i];
                            }
                        }
                    }
                }
            }
        }
        Op::Sqrt { x } => {
            if head[x.index].requires_grad {
                let y = &node.values;
                let slot = &mut head[x.index];
                for i in 0..y.len() {
                    if slot.values[i] > 0.0 {
                        slot.grad[i] += dy[i] * 0.5 / y[i];
                    }
                }
            }
        }
        Op::Elementwise { a, b, kind } => {
            let alen = head[a.index].values.len();
            let blen = head[b.index].values.len();
            let len = node.values.len();
            // Gradients may hit the same node twice when a == b; two
            // sequential accumulation passes keep that correct.
            if head[a.index].requires_grad {
                let bvals: Vec<f64> = head[b.index].values.clone();
                let ga = &mut head[a.index].grad;
                for i in 0..len {
                    let bi = bvals[if blen == 1 { 0 } else { i }];
                    let contrib = match kind {
                        BinaryKind::Add => dy[i],
                        BinaryKind::Sub => dy[i],
                        BinaryKind::Mul => dy[i] * bi,
                        BinaryKind::Div => dy[i] / guard_denominator(bi),
                    };
                    ga[if alen == 1 { 0 } else { i }] += contrib;
                }
            }
            if head[b.index].requires_grad {
                let avals: Vec<f64> = head[a.index].values.clone();
                let slot = &mut head[b.index];
                for i in 0..len {
                    let ai = avals[if alen == 1 { 0 } else { i }];
                    let bi = slot.values[if blen == 1 { 0 } else { i }];
                    let contrib = match kind {
                        BinaryKind::Add => dy[i],
                        BinaryKind::Sub => -dy[i],
                        BinaryKind::Mul => dy[i] * ai,
                        BinaryKind::Div => {
                            let g = guard_denominator(bi);
                            -dy[i] * ai / (g * g)
                        }
                    };
                    slot.grad[if blen == 1 { 0 } else { i }] += contrib;
                }
            }
        }
        Op::Scale { x, c } => {
            if head[x.index].requires_grad {
                let g = &mut head[x.index].grad;
                for i in 0..dy.len() {
                    g[i] += c * dy[i];
                }
            }
        }
        Op::AddBias { x, bias } => {
            let d = head[bias.index].values.len();
            if head[x.index].requires_grad {
                let g = &mut head[x.index].grad;
                for i in 0..dy.len() {
                    g[i] += dy[i];
                }
            }
            if head[bias.index].requires_grad {
                let g = &mut head[bias.index].grad;
                let rows = dy.len() / d;
                for i in 0..rows {
                    for j in 0..d {
                        g[j] += dy[i * d + j];
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            if *axis == 0 {
                let mut at = 0;
                for &v in xs {
                    let slot = &mut head[v.index];
                    let len = slot.values.len();
                    if slot.requires_grad {
                        for i in 0..len {
                            slot.grad[i] += dy[at + i];
                        }
                    }
                    at += len;
                }
            } else {
                let out_cols = node.shape[1];
                let rows = node.shape[0];
                let mut col_at = 0;
                for &v in xs {
                    let slot = &mut head[v.index];
                    let cols = slot.shape[1];
                    if slot.requires_grad {
                        for i in 0..rows {
                            for j in 0..cols {
                                slot.grad[i * cols + j] += dy[i * out_cols + col_at + j];
                            }
                        }
                    }
                    col_at += cols;
                }
            }
        }
        Op::Slice { x, axis, start, len } => {
            let slot = &mut head[x.index];
            if slot.requires_grad {
                if *axis == 0 {
                    let row: usize = slot.shape[1..].iter().product();
                    for i in 0..len * row {
                        slot.grad[start * row + i] += dy[i];
                    }
                } else {
                    let rows = slot.shape[0];
                    let cols = slot.shape[1];
                    for i in 0..rows {
                        for j in 0..*len {
                            slot.grad[i * cols + start + j] += dy[i * len + j];
                        }
                    }
                }
            }
        }
        Op::ReduceMean { xs } => {
            let inv = 1.0 / xs.len() as f64;
            for &v in xs {
                let slot = &mut head[v.index];
                if slot.requires_grad {
                    for i in 0..dy.len() {
                        slot.grad[i] += inv * dy[i];
                    }
                }
            }
        }
        Op::Sum { x } => {
            let slot = &mut head[x.index];
            if slot.requires_grad {
                for g in slot.grad.iter_mut() {
                    *g += dy[0];
                }
            }
        }
        Op::SumSq { x } => {
            let slot = &mut head[x.index];
            if slot.requires_grad {
                for i in 0..slot.values.len() {
                    slot.grad[i] += 2.0 * slot.values[i] * dy[0];
                }
            }
        }
        Op::RowSum { x } => {
            let slot = &mut head[x.index];
            if slot.requires_grad {
                let d = slot.shape[1];
                for i in 0..slot.shape[0] {
                    for j in 0..d {
                        slot.grad[i * d + j] += dy[i];
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let slot = &mut head[x.index];
            if slot.requires_grad {
                let d = slot.shape[1];
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        slot.grad[i * d + j] += dy[row * d + j];
                    }
                }
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let slot = &mut head[logits.index];
            if slot.requires_grad {
                let n = targets.len() as f64;
                for i in 0..targets.len() {
                    let s = stable_sigmoid(slot.values[i]);
                    slot.grad[i] += dy[0] * (s - targets[i]) / n;
                }
            }
        }
        Op::CrossEntropyRows { logits, labels, lse } => {
            let slot = &mut head[logits.index];
            if slot.requires_grad {
                let k = slot.shape[1];
                let n = labels.len() as f64;
                for i in 0..labels.len() {
                    for j in 0..k {
                        let soft = (slot.values[i * k + j] - lse[i]).exp();
                        let hot = if j == labels[i] { 1.0 } else { 0.0 };
                        slot.grad[i * k + j] += dy[0] * (soft - hot) / n;
                    }
                }
            }
        }
        Op::TripletBatchAll { feats, coef, active } => {
            let slot = &mut head[feats.index];
            if slot.requires_grad && *active > 0 {
                let r = slot.shape[0];
                let d = slot.shape[1];
                let w = dy[0] / *active as f64;
                for i in 0..r {
                    let mut row_total = 0.0;
                    for j in 0..r {
                        row_total += coef[i * r + j];
                    }
                    for j in 0..r {
                        let c = coef[i * r + j];
                        if c != 0.0 && j != i {
                            for col in 0..d {
                                slot.grad[i * d + col] -= w * c * slot.values[j * d + col];
                            }
                        }
                    }
                    if row_total != 0.0 {
                        for col in 0..d {
                            slot.grad[i * d + col] += w * row_total * slot.values[i * d + col];
                        }
                    }
                }
            }
        }
    }
}
