//! A small reverse-mode differentiation tape over dense 2-D `f64` tensors,
//! with a sparse graph propagation kernel.
//!
//! A [`Tape`] is rebuilt for every training step. Operations append nodes and
//! return [`Var`] handles; [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for every node that depends on a parameter.
//!
//! ```
//! use mbrec::diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).data, vec![6.0]);
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::graph::BipartiteGraph;
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: input outside the function's domain")]
    Domain { op: &'static str },
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor, DiffError> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "tensor",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn column(values: Vec<f64>) -> Tensor {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `a (n x k) * b (k x m)`.
pub(crate) fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    par::for_each_row(&mut out, m, |i, dst| {
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            dst.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    });
    Tensor { rows: n, cols: m, data: out }
}

/// `a (n x k) * b^T` for `b (m x k)`.
pub(crate) fn mm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows, b.rows);
    let mut out = vec![0.0; n * m];
    par::for_each_row(&mut out, m, |i, dst| {
        let ar = a.row(i);
        for (j, o) in dst.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    });
    Tensor { rows: n, cols: m, data: out }
}

/// `a^T * b` for `a (n x k)`, `b (n x m)`.
pub(crate) fn mm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * m];
    par::for_each_row(&mut out, m, |p, dst| {
        for i in 0..n {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            dst.iter_mut().zip(b.row(i)).for_each(|(o, bv)| *o += av * bv);
        }
    });
    Tensor { rows: k, cols: m, data: out }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    RowMean(Var),
    MeanOf(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    NormalizeRows(Var),
    RowDot(Var, Var),
    PairwiseSqDist(Var),
    DoubleCenter(Var),
    LogSumExpRows(Var),
    Diag(Var),
    Propagate {
        graph: Arc<BipartiteGraph>,
        x: Var,
        gates: Option<Var>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.same_shape(y) {
            Ok(())
        } else {
            Err(shape_err(
                op,
                format!("{}x{} vs {}x{}", x.rows, x.cols, y.rows, y.cols),
            ))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.rows {
            return Err(shape_err(
                "matmul",
                format!("{}x{} * {}x{}", x.rows, x.cols, y.rows, y.cols),
            ));
        }
        let out = mm(x, y);
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.cols {
            return Err(shape_err(
                "matmul_nt",
                format!("{}x{} * ({}x{})^T", x.rows, x.cols, y.rows, y.cols),
            ));
        }
        let out = mm_nt(x, y);
        Ok(self.derived(out, Op::MatMulNT(a, b), &[a, b]))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        self.check_same(op_name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let out = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        Ok(self.derived(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.derived(out, Op::Scale(a, factor), &[a])
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows != 1 || r.cols != x.cols {
            return Err(shape_err(
                "add_row",
                format!("{}x{} + row {}x{}", x.rows, x.cols, r.rows, r.cols),
            ));
        }
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(x.cols.max(1)) {
            chunk.iter_mut().zip(&r.data).for_each(|(o, b)| *o += b);
        }
        Ok(self.derived(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let cols = self.value(*first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(shape_err("concat_rows", format!("{} vs {} columns", t.cols, cols)));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let out = Tensor { rows, cols, data };
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows != y.rows {
            return Err(shape_err("concat_cols", format!("{} vs {} rows", x.rows, y.rows)));
        }
        let cols = x.cols + y.cols;
        let mut data = Vec::with_capacity(x.rows * cols);
        for r in 0..x.rows {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let out = Tensor {
            rows: x.rows,
            cols,
            data,
        };
        Ok(self.derived(out, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, DiffError> {
        let x = self.value(a);
        if let Some(bad) = index.iter().find(|&&i| i >= x.rows) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", x.rows)));
        }
        let mut data = Vec::with_capacity(index.len() * x.cols);
        for &i in index {
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor {
            rows: index.len(),
            cols: x.cols,
            data,
        };
        Ok(self.derived(out, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Mean over rows, giving `1 x c`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.rows == 0 {
            return Err(shape_err("row_mean", "no rows".into()));
        }
        let mut out = vec![0.0; x.cols];
        for r in 0..x.rows {
            out.iter_mut().zip(x.row(r)).for_each(|(o, v)| *o += v);
        }
        let n = x.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let out = Tensor {
            rows: 1,
            cols: x.cols,
            data: out,
        };
        Ok(self.derived(out, Op::RowMean(a), &[a]))
    }

    /// Elementwise mean of same-shape tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("mean_of", "no inputs".into()))?;
        for &p in &parts[1..] {
            self.check_same("mean_of", first, p)?;
        }
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            out.data
                .iter_mut()
                .zip(&self.value(p).data)
                .for_each(|(o, v)| *o += v);
        }
        let n = parts.len() as f64;
        out.data.iter_mut().for_each(|o| *o /= n);
        Ok(self.derived(out, Op::MeanOf(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.data.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = x.data.iter().sum::<f64>() / x.data.len() as f64;
        Ok(self.derived(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.derived(out, Op::LogSigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.derived(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).data.iter().any(|&v| !(v > 0.0)) {
            return Err(DiffError::Domain { op: "log" });
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.derived(out, Op::Log(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.derived(out, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).data.iter().any(|&v| !(v >= 0.0)) {
            return Err(DiffError::Domain { op: "sqrt" });
        }
        let out = self.value(a).map(f64::sqrt);
        Ok(self.derived(out, Op::Sqrt(a), &[a]))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are a domain error.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows {
            let n = dot(x.row(r), x.row(r)).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(DiffError::Domain { op: "l2_norm_rows" });
            }
            out.data[r * x.cols..(r + 1) * x.cols]
                .iter_mut()
                .for_each(|v| *v /= n);
        }
        Ok(self.derived(out, Op::NormalizeRows(a), &[a]))
    }

    /// Per-row dot product, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check_same("row_dot", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = (0..x.rows).map(|r| dot(x.row(r), y.row(r))).collect();
        Ok(self.derived(Tensor::column(data), Op::RowDot(a, b), &[a, b]))
    }

    /// `D[i][j] = |x_i - x_j|^2`.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows;
        let mut out = vec![0.0; n * n];
        par::for_each_row(&mut out, n, |i, dst| {
            let xi = x.row(i);
            for (j, o) in dst.iter_mut().enumerate() {
                *o = xi
                    .iter()
                    .zip(x.row(j))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
            }
        });
        let out = Tensor { rows: n, cols: n, data: out };
        self.derived(out, Op::PairwiseSqDist(a), &[a])
    }

    /// `H A H` with the centering matrix `H = I - 11^T / n`.
    pub fn double_center(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.rows != x.cols || x.rows == 0 {
            return Err(shape_err("double_center", format!("{}x{}", x.rows, x.cols)));
        }
        let out = double_center(x);
        Ok(self.derived(out, Op::DoubleCenter(a), &[a]))
    }

    /// `log(sum_j exp(x_ij))` per row, `n x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.cols == 0 {
            return Err(shape_err("logsumexp_rows", "no columns".into()));
        }
        let data = (0..x.rows).map(|r| logsumexp(x.row(r))).collect();
        Ok(self.derived(Tensor::column(data), Op::LogSumExpRows(a), &[a]))
    }

    /// Diagonal of a square matrix, `n x 1`.
    pub fn diag(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.rows != x.cols {
            return Err(shape_err("diag", format!("{}x{}", x.rows, x.cols)));
        }
        let data = (0..x.rows).map(|i| x.get(i, i)).collect();
        Ok(self.derived(Tensor::column(data), Op::Diag(a), &[a]))
    }

    /// One LightGCN hop over `graph`, optionally scaling each edge message by
    /// the matching entry of `gates` (an `|E| x 1` tensor).
    pub fn propagate(
        &mut self,
        graph: &Arc<BipartiteGraph>,
        x: Var,
        gates: Option<Var>,
    ) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if xv.rows != graph.num_nodes() {
            return Err(shape_err(
                "propagate",
                format!("{} rows for {} nodes", xv.rows, graph.num_nodes()),
            ));
        }
        if let Some(g) = gates {
            let gv = self.value(g);
            if gv.rows != graph.num_edges() || gv.cols != 1 {
                return Err(shape_err(
                    "propagate",
                    format!("gates {}x{} for {} edges", gv.rows, gv.cols, graph.num_edges()),
                ));
            }
        }
        let dim = xv.cols;
        let mut out = vec![0.0; xv.data.len()];
        graph.propagate_into(
            &xv.data,
            dim,
            gates.map(|g| self.value(g).data.as_slice()),
            &mut out,
        );
        let out = Tensor {
            rows: xv.rows,
            cols: dim,
            data: out,
        };
        let mut inputs = vec![x];
        inputs.extend(gates);
        Ok(self.derived(
            out,
            Op::Propagate {
                graph: graph.clone(),
                x,
                gates,
            },
            &inputs,
        ))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.rows != 1 || lv.cols != 1 {
            return Err(DiffError::NotScalar {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        if !lv.is_finite() {
            return Err(DiffError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        // only keep gradients of nodes that depend on parameters
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.data.iter_mut().zip(&delta.data).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, mm_nt(g, val(*b)));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, mm_tn(val(*a), g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, mm(g, val(*b)));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, mm_tn(g, val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, z) = (val(*a), val(*b));
                acc(*a, zip(g, z, |p, q| p * q));
                acc(*b, zip(g, x, |p, q| p * q));
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut r = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    r.data.iter_mut().zip(g.row(i)).for_each(|(o, v)| *o += v);
                }
                acc(*row, r);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).data.len();
                    let slice = g.data[offset..offset + n].to_vec();
                    offset += n;
                    let t = val(p);
                    acc(p, Tensor { rows: t.rows, cols: t.cols, data: slice });
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols, val(*b).cols);
                let mut ga = Vec::with_capacity(g.rows * ca);
                let mut gb = Vec::with_capacity(g.rows * cb);
                for r in 0..g.rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor { rows: g.rows, cols: ca, data: ga });
                acc(*b, Tensor { rows: g.rows, cols: cb, data: gb });
            }
            Op::GatherRows(a, index) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for (k, &i) in index.iter().enumerate() {
                    out.data[i * x.cols..(i + 1) * x.cols]
                        .iter_mut()
                        .zip(g.row(k))
                        .for_each(|(o, v)| *o += v);
                }
                acc(*a, out);
            }
            Op::RowMean(a) => {
                let x = val(*a);
                let n = x.rows as f64;
                let row: Vec<f64> = g.data.iter().map(|v| v / n).collect();
                let data = row.iter().copied().cycle().take(x.rows * x.cols).collect();
                acc(*a, Tensor { rows: x.rows, cols: x.cols, data });
            }
            Op::MeanOf(parts) => {
                let share = g.map(|v| v / parts.len() as f64);
                for &p in parts {
                    acc(p, share.clone());
                }
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Tensor::filled(x.rows, x.cols, g.item()));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let n = x.data.len() as f64;
                acc(*a, Tensor::filled(x.rows, x.cols, g.item() / n));
            }
            Op::Sigmoid(a) => acc(*a, zip(g, y, |gv, s| gv * s * (1.0 - s))),
            Op::LogSigmoid(a) => acc(*a, zip(g, val(*a), |gv, x| gv * sigmoid(-x))),
            Op::Exp(a) => acc(*a, zip(g, y, |gv, e| gv * e)),
            Op::Log(a) => acc(*a, zip(g, val(*a), |gv, x| gv / x)),
            Op::Square(a) => acc(*a, zip(g, val(*a), |gv, x| 2.0 * gv * x)),
            Op::Sqrt(a) => acc(*a, zip(g, y, |gv, s| if s > 0.0 { gv / (2.0 * s) } else { 0.0 })),
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let n = dot(x.row(r), x.row(r)).sqrt();
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = dot(yr, gr);
                    for c in 0..x.cols {
                        out.data[r * x.cols + c] = (gr[c] - yr[c] * proj) / n;
                    }
                }
                acc(*a, out);
            }
            Op::RowDot(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let scale_rows = |t: &Tensor| {
                    let mut out = t.clone();
                    for r in 0..t.rows {
                        let s = g.data[r];
                        out.data[r * t.cols..(r + 1) * t.cols]
                            .iter_mut()
                            .for_each(|v| *v *= s);
                    }
                    out
                };
                acc(*a, scale_rows(z));
                acc(*b, scale_rows(x));
            }
            Op::PairwiseSqDist(a) => {
                let x = val(*a);
                let (n, d) = (x.rows, x.cols);
                let mut out = vec![0.0; n * d];
                par::for_each_row(&mut out, d, |i, dst| {
                    let xi = x.row(i);
                    for j in 0..n {
                        let w = 2.0 * (g.data[i * n + j] + g.data[j * n + i]);
                        if w == 0.0 {
                            continue;
                        }
                        let xj = x.row(j);
                        for k in 0..d {
                            dst[k] += w * (xi[k] - xj[k]);
                        }
                    }
                });
                acc(*a, Tensor { rows: n, cols: d, data: out });
            }
            Op::DoubleCenter(a) => acc(*a, double_center(g)),
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let lse = y.data[r];
                    let gr = g.data[r];
                    for (o, v) in out.data[r * x.cols..(r + 1) * x.cols]
                        .iter_mut()
                        .zip(x.row(r))
                    {
                        *o = gr * (v - lse).exp();
                    }
                }
                acc(*a, out);
            }
            Op::Diag(a) => {
                let n = val(*a).rows;
                let mut out = Tensor::zeros(n, n);
                for i in 0..n {
                    out.data[i * n + i] = g.data[i];
                }
                acc(*a, out);
            }
            Op::Propagate { graph, x, gates } => {
                let gate_vals = gates.map(|gv| val(gv).data.as_slice());
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; g.data.len()];
                    graph.propagate_into(&g.data, g.cols, gate_vals, &mut dx);
                    acc(*x, Tensor { rows: g.rows, cols: g.cols, data: dx });
                }
                if let Some(gv) = gates {
                    if self.nodes[gv.0].requires_grad {
                        let dg = graph.gate_gradient(&val(*x).data, &g.data, g.cols);
                        acc(*gv, Tensor::column(dg));
                    }
                }
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(p, q)| f(*p, *q)).collect(),
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn double_center(x: &Tensor) -> Tensor {
    let n = x.rows;
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|r| x.row(r).iter().sum::<f64>() / nf).collect();
    let mut col_means = vec![0.0; n];
    for r in 0..n {
        col_means.iter_mut().zip(x.row(r)).for_each(|(c, v)| *c += v);
    }
    col_means.iter_mut().for_each(|c| *c /= nf);
    let total = row_means.iter().sum::<f64>() / nf;
    Tensor::from_fn(n, n, |i, j| x.get(i, j) - row_means[i] - col_means[j] + total)
}

/// Compares reverse-mode gradients against central differences (`h = 1e-5`).
///
/// `f` builds a scalar on a fresh tape from one `Var` per entry of `params`.
/// At most `max_coords` coordinates per parameter are sampled (all of them if
/// the parameter is smaller). Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F, E>(f: F, params: &[Tensor], max_coords: usize, seed: u64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<DiffError>,
{
    const H: f64 = 1e-5;
    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite("grad_check objective".into()).into());
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        let n = p.data.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, max_coords).into_vec()
        };
        for c in coords {
            let orig = work[pi].data[c];
            work[pi].data[c] = orig + H;
            let plus = eval(&work)?;
            work[pi].data[c] = orig - H;
            let minus = eval(&work)?;
            work[pi].data[c] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic.data[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
