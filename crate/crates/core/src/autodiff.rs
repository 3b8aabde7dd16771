//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep over
//! the tape. Values are `rows x cols` row-major matrices; scalars are `1 x 1`.
//!
//! ```
//! use pal::autodiff::Graph;
//! use pal::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.input(&Tensor::scalar(3.0).with_grad());
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.scalar(y), 9.0);
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

use std::sync::Arc;

use crate::error::{dim_err, PalError, Result};
use crate::numeric::{l2_normalize_in_place, log_softmax_row, lse_unchecked, softmax_row};
use crate::tensor::{matmul, matmul_nt, matmul_tn, pairwise_dot, pairwise_sum, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The primitive op kinds exposed through [`Graph::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Scale(f64),
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    Dot,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    L2NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    LogSumExpRows { x: Var, mask: Option<Arc<[bool]>> },
    LogSoftmaxRows(Var),
    SoftmaxRows { x: Var, tau: f64 },
    WeightedSum { x: Var, weights: Arc<[f64]> },
    GatherRows { x: Var, index: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf copied from a tensor; tracks gradients iff the tensor does.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.rows_cols();
        self.push(t.values().to_vec(), r, c, Op::Leaf, t.requires_grad())
    }

    /// Gradient-free leaf.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(dim_err("constant", format!("{rows}x{cols} with {} values", values.len())));
        }
        Ok(self.push(values, rows, cols, Op::Leaf, false))
    }

    /// Trainable leaf built from raw values.
    pub fn parameter(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        let v = self.constant(rows, cols, values)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value into a tensor of matching shape.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shapes are consistent")
    }

    /// Dispatches one of the primitive ops by kind.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Dot => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(dim_err("forward_op", format!("{kind:?} takes {arity} inputs, got {}", inputs.len())));
        }
        let a = inputs[0];
        match kind {
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Sub => self.sub(a, inputs[1]),
            OpKind::Dot => self.dot(a, inputs[1]),
            OpKind::Scale(c) => Ok(self.scale(a, c)),
            OpKind::Relu => Ok(self.relu(a)),
            OpKind::Exp => Ok(self.exp(a)),
            OpKind::Log => self.log(a),
            OpKind::Sum => Ok(self.sum(a)),
            OpKind::Mean => Ok(self.mean(a)),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1)));
        }
        Ok(sa)
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, r, c, rec, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(value, r, c, rec, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(dim_err("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let value = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, m, n, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`; both operands share their column count.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(dim_err("matmul_nt", format!("{m}x{k} * ({n}x{k2})^T")));
        }
        let value = matmul_nt(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, m, n, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), (r, n2)) = (self.shape(a), self.shape(row));
        if r != 1 || n != n2 {
            return Err(dim_err("add_row", format!("{m}x{n} + broadcast {r}x{n2}")));
        }
        let bias = self.value(row);
        let value =
            self.value(a).chunks_exact(n).flat_map(|chunk| chunk.iter().zip(bias).map(|(x, b)| x + b)).collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, m, n, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(PalError::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = pairwise_sum(self.value(a));
        let rg = self.rg(&[a]);
        self.push(vec![s], 1, 1, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = pairwise_sum(v) / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![s], 1, 1, Op::Mean(a), rg)
    }

    /// Inner product of two same-shape nodes, flattened.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = pairwise_dot(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![s], 1, 1, Op::Dot(a, b), rg))
    }

    /// Divides every row by `max(|row|, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.shape(a);
        let mut value = self.value(a).to_vec();
        let norms = value.chunks_exact_mut(c).map(|row| l2_normalize_in_place(row, eps)).collect();
        let rg = self.rg(&[a]);
        self.push(value, r, c, Op::L2NormalizeRows { x: a, norms, eps }, rg)
    }

    /// Row-wise log-sum-exp producing an `m x 1` column. When a mask is
    /// given, only entries marked `true` take part.
    pub fn log_sum_exp_rows(&mut self, a: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(dim_err("log_sum_exp_rows", format!("mask len {} for {r}x{c}", m.len())));
            }
        }
        let vals = self.value(a);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &vals[i * c..(i + 1) * c];
            let lse = match &mask {
                None => lse_unchecked(row),
                Some(m) => {
                    let picked: Vec<f64> =
                        row.iter().zip(&m[i * c..(i + 1) * c]).filter_map(|(&x, &keep)| keep.then_some(x)).collect();
                    if picked.is_empty() {
                        return Err(PalError::Domain(format!("log_sum_exp over empty masked row {i}")));
                    }
                    lse_unchecked(&picked)
                }
            };
            out.push(lse);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, r, 1, Op::LogSumExpRows { x: a, mask }, rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).chunks_exact(c).flat_map(log_softmax_row).collect();
        let rg = self.rg(&[a]);
        self.push(value, r, c, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise `softmax(a / tau)`.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(PalError::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        let (r, c) = self.shape(a);
        let value = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| {
                let scaled: Vec<f64> = row.iter().map(|x| x / tau).collect();
                softmax_row(&scaled)
            })
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(value, r, c, Op::SoftmaxRows { x: a, tau }, rg))
    }

    /// `sum_ij w_ij a_ij` for constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Arc<[f64]>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(dim_err(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), self.value(a).len()),
            ));
        }
        let s = pairwise_dot(self.value(a), &weights);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s], 1, 1, Op::WeightedSum { x: a, weights }, rg))
    }

    /// Builds a matrix whose `i`-th row is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(dim_err("gather_rows", format!("row {bad} of {r}")));
        }
        if index.is_empty() {
            return Err(dim_err("gather_rows", "empty index"));
        }
        let vals = self.value(a);
        let value = index.iter().flat_map(|&i| vals[i * c..(i + 1) * c].iter().copied()).collect();
        let rg = self.rg(&[a]);
        let n = index.len();
        Ok(self.push(value, n, c, Op::GatherRows { x: a, index }, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (r, c) = self.shape(root);
        if r * c != 1 {
            return Err(PalError::Contract(format!("backward root must be scalar, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves keep their gradients.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul(g, self.value(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.requires_grad(*row) {
                    let mut colsum = vec![0.0; cols];
                    for chunk in g.chunks_exact(cols) {
                        for (s, x) in colsum.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, *row, colsum);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|x| c * x).collect()),
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = g.iter().zip(va).map(|(&x, &v)| if v > 0.0 { x } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(&node.value).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.iter().zip(self.value(*a)).map(|(x, v)| x / v).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Dot(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, self.value(*b).iter().map(|y| g[0] * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).iter().map(|y| g[0] * y).collect());
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let y = &node.value[i * cols..(i + 1) * cols];
                    let gi = &g[i * cols..(i + 1) * cols];
                    let out = &mut d[i * cols..(i + 1) * cols];
                    if norms[i] >= *eps {
                        let yg = pairwise_dot(y, gi);
                        for ((o, &gv), &yv) in out.iter_mut().zip(gi).zip(y) {
                            *o = (gv - yv * yg) / norms[i];
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(gi) {
                            *o = gv / eps;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogSumExpRows { x, mask } => {
                let (_, c) = self.shape(*x);
                let vx = self.value(*x);
                let mut d = vec![0.0; vx.len()];
                for (i, (&gi, &lse)) in g.iter().zip(&node.value).enumerate() {
                    for j in 0..c {
                        let k = i * c + j;
                        if mask.as_ref().is_none_or(|m| m[k]) {
                            d[k] = gi * (vx[k] - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogSoftmaxRows(x) => {
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let y = &node.value[i * cols..(i + 1) * cols];
                    let gi = &g[i * cols..(i + 1) * cols];
                    let gsum = pairwise_sum(gi);
                    for ((o, &gv), &yv) in d[i * cols..(i + 1) * cols].iter_mut().zip(gi).zip(y) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxRows { x, tau } => {
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let y = &node.value[i * cols..(i + 1) * cols];
                    let gi = &g[i * cols..(i + 1) * cols];
                    let yg = pairwise_dot(y, gi);
                    for ((o, &gv), &yv) in d[i * cols..(i + 1) * cols].iter_mut().zip(gi).zip(y) {
                        *o = yv * (gv - yg) / tau;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|w| g[0] * w).collect());
            }
            Op::GatherRows { x, index } => {
                let (r, c) = self.shape(*x);
                let mut d = vec![0.0; r * c];
                for (dst, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[dst * c + j];
                    }
                }
                self.accumulate(grads, *x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let v = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(r, c, v).unwrap().with_grad()
    }

    #[test]
    fn primitive_examples() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = g.input(&Tensor::vector(vec![3.0, 4.0]).unwrap());
        let s = g.forward_op(OpKind::Add, &[a, b]).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);

        let eye = g.constant(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let v = g.constant(3, 1, vec![0.3, -2.0, 7.5]).unwrap();
        let mv = g.forward_op(OpKind::MatMul, &[eye, v]).unwrap();
        assert_eq!(g.value(mv), &[0.3, -2.0, 7.5]);

        let x = g.input(&Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.forward_op(OpKind::Relu, &[x]).unwrap();
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
        let c = g.constant(3, 2, vec![0.0; 6]).unwrap();
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
        assert!(g.forward_op(OpKind::Add, &[a]).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::scalar(3.0).with_grad());
        let y = g.dot(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(g.backward(x), Err(PalError::Contract(_))));
    }

    #[test]
    fn lse_gradient_is_softmax() {
        let v = vec![0.3, -1.2, 2.5, 0.0];
        let mut g = Graph::new();
        let x = g.input(&Tensor::matrix(1, 4, v.clone()).unwrap().with_grad());
        let l = g.log_sum_exp_rows(x, None).unwrap();
        let grads = g.backward(l).unwrap();
        let sm = softmax_row(&v);
        for (a, b) in grads.get(x).unwrap().iter().zip(&sm) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_sum_matches_finite_differences() {
        let x = Tensor::vector(vec![0.4, -1.3, 2.2, 0.7]).unwrap().with_grad();
        let report = check_gradients(&[x], 1e-5, |g, v| {
            let y = g.l2_normalize_rows(v[0], 1e-12);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, 3, 4);
            let b = rand_tensor(&mut rng, 4, 5);
            let c = rand_tensor(&mut rng, 3, 4);
            let row = rand_tensor(&mut rng, 1, 4);
            let mask: Arc<[bool]> = (0..12).map(|k| k % 4 != 1).collect::<Vec<_>>().into();
            let weights: Arc<[f64]> = (0..12).map(|k| (k as f64 * 0.37).sin()).collect::<Vec<_>>().into();
            let report = check_gradients(&[a, b, c, row], 1e-5, |g, v| {
                let (a, b, c, row) = (v[0], v[1], v[2], v[3]);
                let ab = g.matmul(a, b)?;
                let abt = g.matmul_nt(a, c)?;
                let s1 = g.sum(ab);
                let ac = g.add(a, c)?;
                let acr = g.add_row(ac, row)?;
                let am = g.sub(acr, c)?;
                let prod = g.mul(am, c)?;
                let rel = g.relu(prod);
                let ex = g.exp(rel);
                let sq = g.mul(a, a)?;
                let shifted = g.exp(sq);
                let lg = g.log(shifted)?;
                let n = g.l2_normalize_rows(acr, 1e-12);
                let lse = g.log_sum_exp_rows(n, Some(mask.clone()))?;
                let ls = g.log_softmax_rows(abt);
                let sm = g.softmax_rows(abt, 0.7)?;
                let ws = g.weighted_sum(lg, weights.clone())?;
                let gath = g.gather_rows(ls, vec![2, 0, 2])?;
                let terms = [s1, g.mean(ex), g.sum(lse), g.sum(gath), g.dot(sm, abt)?, ws, g.scale(s1, 0.25)];
                let mut total = terms[0];
                for &t in &terms[1..] {
                    total = g.add(total, t)?;
                }
                Ok(total)
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.input(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = g.input(&Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap().with_grad());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap(), &[3.0, 7.0]);
    }
}
