use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_shape, Error, Result};
use crate::linalg::Matrix;

/// Value added to attention scores above the diagonal.
pub const MASK_VALUE: f64 = -1e30;

const RMS_EPS: f64 = 1e-6;

/// A named-free parameter or data tensor. Tensors are rank 2; vectors are
/// `1×n` and scalars `1×1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub value: Matrix,
    pub requires_grad: bool,
    pub grad: Option<Matrix>,
}

impl Tensor {
    pub fn trainable(value: Matrix) -> Self {
        Tensor {
            value,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        Tensor {
            value,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Adds `g` into the gradient buffer. Frozen tensors ignore the call.
    pub fn accumulate_grad(&mut self, g: &Matrix) {
        if !self.requires_grad {
            return;
        }
        match &mut self.grad {
            Some(existing) => existing.axpy(1.0, g),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Gradient buffer, all zeros when nothing has been accumulated.
    pub fn grad_or_zeros(&self) -> Matrix {
        self.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(self.value.rows(), self.value.cols()))
    }
}

/// Clears the gradients of every tensor in `params`.
pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Tensor>) {
    for p in params {
        p.zero_grad();
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Silu(Var),
    MaxExcluding { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    FrobeniusSq(Var),
    CausalMask(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Silu(..) => "silu",
            Op::MaxExcluding { .. } => "max_excluding",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::FrobeniusSq(..) => "frobenius_sq",
            Op::CausalMask(..) => "causal_mask",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn stats(m: &Matrix) -> String {
    let d = m.data();
    let finite: Vec<f64> = d.iter().copied().filter(|x| x.is_finite()).collect();
    let min = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    format!(
        "{}x{} non-finite={} min={min:.3e} max={max:.3e}",
        m.rows(),
        m.cols(),
        d.len() - finite.len()
    )
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Whether `b` is added/multiplied elementwise (same shape) or broadcast as a
/// single row over the rows of `a`.
fn broadcast_kind(a: &Matrix, b: &Matrix, op: &str) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(true)
    } else {
        Err(invalid_shape(format!(
            "{op}: {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )))
    }
}

fn sum_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of `t`, differentiable iff `t.requires_grad`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.value.clone(), t.requires_grad)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            let detail = inputs
                .iter()
                .map(|v| stats(&self.nodes[v.0].value))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::Numeric {
                op: op.name().to_string(),
                detail: format!("non-finite output; inputs: {detail}"),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(invalid_shape(format!(
                "matmul: {}x{} by {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let out = av.matmul(bv);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if broadcast_kind(av, bv, "add")? {
            Matrix::from_fn(av.rows(), av.cols(), |i, j| av[(i, j)] + bv[(0, j)])
        } else {
            av.add(bv)
        };
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product; `b` may also be a single broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if broadcast_kind(av, bv, "multiply")? {
            Matrix::from_fn(av.rows(), av.cols(), |i, j| av[(i, j)] * bv[(0, j)])
        } else {
            av.zip_map(bv, |x, y| x * y)
        };
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(invalid_input(format!(
                "gather index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols() as f64;
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let ms = xv.row(i).iter().map(|v| v * v).sum::<f64>() / n;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            out.row_mut(i).iter_mut().for_each(|v| *v *= r);
        }
        self.push(out, Op::RmsNorm { x, inv_rms }, &[x])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    /// Per row `i`, the maximum over columns other than `excluded[i]`
    /// (a column vector). Ties resolve to the lowest column index.
    pub fn max_excluding(&mut self, a: Var, excluded: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if excluded.len() != av.rows() {
            return Err(invalid_shape(format!(
                "max_excluding: {} exclusions for {} rows",
                excluded.len(),
                av.rows()
            )));
        }
        if av.cols() < 2 {
            return Err(invalid_input("max_excluding needs at least two columns"));
        }
        let mut out = Matrix::zeros(av.rows(), 1);
        let mut argmax = Vec::with_capacity(av.rows());
        for (i, &ex) in excluded.iter().enumerate() {
            if ex >= av.cols() {
                return Err(invalid_input(format!("excluded column {ex} out of range")));
            }
            let mut best = usize::MAX;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in av.row(i).iter().enumerate() {
                if j != ex && (best == usize::MAX || v > best_v) {
                    best = j;
                    best_v = v;
                }
            }
            out[(i, 0)] = best_v;
            argmax.push(best);
        }
        self.push(out, Op::MaxExcluding { x: a, argmax }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(invalid_input("mean of an empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Matrix::scalar(s), Op::Mean(a), &[a])
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).frobenius_sq();
        self.push(Matrix::scalar(s), Op::FrobeniusSq(a), &[a])
    }

    /// Adds [`MASK_VALUE`] to every entry strictly above the diagonal.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for j in (i + 1)..out.cols() {
                out[(i, j)] += MASK_VALUE;
            }
        }
        self.push(out, Op::CausalMask(a), &[a])
    }

    /// Concatenation along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid_input("concat of zero tensors"));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let rows = mats[0].rows();
        if mats.iter().any(|m| m.rows() != rows) {
            return Err(invalid_shape("concat: row counts differ"));
        }
        let out = Matrix::hstack(&mats);
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(invalid_shape(format!(
                "slice {start}..{end} of {} columns",
                av.cols()
            )));
        }
        let out = av.columns(start, end);
        self.push(out, Op::Slice { x: a, start }, &[a])
    }

    /// Sweeps the tape backwards from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(invalid_input("backward on an empty tape"));
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(invalid_input(format!(
                "loss must be scalar, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only differentiable nodes keep a gradient.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let send = |v: Var, d: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    send(*a, g.matmul_nt(self.value(*b)), grads);
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, self.value(*a).matmul_tn(g), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                let broadcast = self.value(*b).rows() == 1 && g.rows() != 1;
                send(*b, if broadcast { sum_rows(g) } else { g.clone() }, grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let broadcast = bv.shape() != av.shape();
                let da = if broadcast {
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * bv[(0, j)])
                } else {
                    g.zip_map(bv, |x, y| x * y)
                };
                send(*a, da, grads);
                let prod = g.zip_map(av, |x, y| x * y);
                send(*b, if broadcast { sum_rows(&prod) } else { prod }, grads);
            }
            Op::Scale(a, c) => send(*a, g.scale(*c), grads),
            Op::Transpose(a) => send(*a, g.transpose(), grads),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                    for j in 0..y.cols() {
                        d[(i, j)] = y[(i, j)] * (g[(i, j)] - s);
                    }
                }
                send(*a, d, grads);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s: f64 = g.row(i).iter().sum();
                    for j in 0..y.cols() {
                        d[(i, j)] = g[(i, j)] - y[(i, j)].exp() * s;
                    }
                }
                send(*a, d, grads);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                send(*table, d, grads);
            }
            Op::RmsNorm { x, inv_rms } => {
                let xv = self.value(*x);
                let n = xv.cols() as f64;
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let r = inv_rms[i];
                    let gx: f64 = g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..xv.cols() {
                        d[(i, j)] = r * g[(i, j)] - r * r * r * xv[(i, j)] * gx / n;
                    }
                }
                send(*x, d, grads);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (1.0 + x * (1.0 - s))
                });
                send(*a, d, grads);
            }
            Op::MaxExcluding { x, argmax } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &j) in argmax.iter().enumerate() {
                    d[(i, j)] = g[(i, 0)];
                }
                send(*x, d, grads);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                let s = g.item();
                send(*a, Matrix::from_fn(av.rows(), av.cols(), |_, _| s), grads);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.item() / av.len() as f64;
                send(*a, Matrix::from_fn(av.rows(), av.cols(), |_, _| s), grads);
            }
            Op::FrobeniusSq(a) => send(*a, self.value(*a).scale(2.0 * g.item()), grads),
            Op::CausalMask(a) => send(*a, g.clone(), grads),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    send(p, g.columns(off, off + w), grads);
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                send(*x, d, grads);
            }
        }
    }
}

/// Runs backward from `loss` and accumulates the resulting gradients into the
/// tensors bound to each leaf.
pub fn backward(tape: &Tape, loss: Var, bindings: &mut [(Var, &mut Tensor)]) -> Result<()> {
    let grads = tape.backward(loss)?;
    for (v, t) in bindings.iter_mut() {
        match grads.wrt(*v) {
            Some(g) => t.accumulate_grad(g),
            None => {
                if t.requires_grad {
                    t.accumulate_grad(&Matrix::zeros(t.value.rows(), t.value.cols()));
                }
            }
        }
    }
    Ok(())
}
