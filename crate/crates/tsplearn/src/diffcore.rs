//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles; a
//! single call to [`Graph::backward`] replays the tape in reverse and
//! returns gradients for all leaves created with `requires_grad`. The
//! graph is consumed by the backward pass, so stale-tape reuse is a
//! compile error rather than a runtime one.
//!
//! Everything is `f64`. Every operation (including leaf creation) checks
//! its output for NaN/Inf and fails instead of propagating poison values.
//! Supported shapes are vectors (`[k]`) and matrices (`[r, c]`) — all the
//! network needs; arbitrary broadcasting is out of scope.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got a tensor with {len} entries")]
    NonScalarLoss { len: usize },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("adam: parameter {index} changed shape between steps")]
    AdamShape { index: usize },
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A dense tensor: shape plus row-major data. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar contents; panics if the tensor has more than one entry.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[1],
        }
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulRow(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    SumAxis(Var, usize),
    SumAll(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients returned by [`Graph::backward`], indexed by the original
/// [`Var`] handles. Only leaves created with `requires_grad` have entries.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Row-major matmul with a skip for zero entries of `a` (selector matrices
/// are mostly zeros).
fn matmul_into(r: usize, k: usize, c: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * c..(i + 1) * c];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[kk * c..(kk + 1) * c];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out += g * b^T` where `g` is `r x c` and `b` is `k x c`.
fn matmul_nt_add(r: usize, c: usize, k: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..r {
        let g_row = &g[i * c..(i + 1) * c];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * c..(kk + 1) * c];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T * g` where `a` is `r x k` and `g` is `r x c`.
fn matmul_tn_add(r: usize, k: usize, c: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * c..(i + 1) * c];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let out_row = &mut out[kk * c..(kk + 1) * c];
                for (o, &gv) in out_row.iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
    }
}

/// A recorded computation. Create leaves, apply operations, then call
/// [`Graph::backward`] on a scalar result.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an input tensor. Only leaves with `requires_grad` receive
    /// gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inserts a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(op: &'static str, detail: String) -> DiffError {
        DiffError::ShapeMismatch { op, detail }
    }

    /// Matrix product `[r, k] x [k, c] -> [r, c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Self::mismatch(
                "matmul",
                format!("{:?} x {:?}", ta.shape, tb.shape),
            ));
        }
        let (r, k, c) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; r * c];
        matmul_into(r, k, c, &ta.data, &tb.data, &mut out);
        let value = Tensor {
            shape: vec![r, c],
            data: out,
        };
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", value, rg, Op::Matmul(a, b))
    }

    fn zip_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Self::mismatch(
                op_name,
                format!("{:?} vs {:?}", ta.shape, tb.shape),
            ));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.requires(a) || self.requires(b);
        self.push(op_name, value, rg, op)
    }

    /// Elementwise sum of tensors with identical shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference of tensors with identical shapes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product of tensors with identical shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a constant to every entry.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|v| v + c).collect(),
        };
        let rg = self.requires(a);
        self.push("add_scalar", value, rg, Op::AddScalar(a))
    }

    /// Multiplies every entry by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|v| v * c).collect(),
        };
        let rg = self.requires(a);
        self.push("scale", value, rg, Op::Scale(a, c))
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        m: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if tm.shape.len() != 2 || tv.shape.len() != 1 || tm.shape[1] != tv.shape[0] {
            return Err(Self::mismatch(
                op_name,
                format!("matrix {:?} with row vector {:?}", tm.shape, tv.shape),
            ));
        }
        let c = tm.shape[1];
        let data = tm
            .data
            .iter()
            .enumerate()
            .map(|(idx, &x)| f(x, tv.data[idx % c]))
            .collect();
        let value = Tensor {
            shape: tm.shape.clone(),
            data,
        };
        let rg = self.requires(m) || self.requires(v);
        self.push(op_name, value, rg, op)
    }

    /// `out[i][j] = m[i][j] * v[j]`: gate a matrix by a row vector.
    pub fn mul_row(&mut self, m: Var, v: Var) -> Result<Var, DiffError> {
        self.row_broadcast("mul_row", m, v, |x, y| x * y, Op::MulRow(m, v))
    }

    /// `out[i][j] = m[i][j] + v[j]`: add a bias row to every row.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var, DiffError> {
        self.row_broadcast("add_row", m, v, |x, y| x + y, Op::AddRow(m, v))
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        let rg = self.requires(a);
        self.push("relu", value, rg, Op::Relu(a))
    }

    /// Logistic sigmoid, numerically stable on both tails.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&v| crate::loss::sigmoid(v)).collect(),
        };
        let rg = self.requires(a);
        self.push("sigmoid", value, rg, Op::Sigmoid(a))
    }

    fn softmax_lanes(tensor: &Tensor, axis: usize) -> Vec<Vec<usize>> {
        let (rows, cols) = (tensor.rows(), tensor.cols());
        if tensor.shape.len() == 1 {
            vec![(0..tensor.data.len()).collect()]
        } else if axis == 1 {
            (0..rows).map(|i| (i * cols..(i + 1) * cols).collect()).collect()
        } else {
            (0..cols).map(|j| (0..rows).map(|i| i * cols + j).collect()).collect()
        }
    }

    /// Softmax along `axis` of a matrix (or of a whole vector with axis 0).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let rank = ta.shape.len();
        if rank > 2 || (rank == 1 && axis != 0) || (rank == 2 && axis > 1) {
            return Err(Self::mismatch(
                "softmax",
                format!("axis {axis} on shape {:?}", ta.shape),
            ));
        }
        let mut data = ta.data.clone();
        for lane in Self::softmax_lanes(ta, axis) {
            let max = lane
                .iter()
                .map(|&i| ta.data[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in &lane {
                let e = (ta.data[i] - max).exp();
                data[i] = e;
                total += e;
            }
            for &i in &lane {
                data[i] /= total;
            }
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.requires(a);
        self.push("softmax", value, rg, Op::Softmax(a, axis))
    }

    /// Sums a matrix along `axis`: axis 0 collapses rows (result `[cols]`),
    /// axis 1 collapses columns (result `[rows]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 2 || axis > 1 {
            return Err(Self::mismatch(
                "sum_axis",
                format!("axis {axis} on shape {:?}", ta.shape),
            ));
        }
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        let value = if axis == 0 {
            let mut out = vec![0.0; cols];
            for i in 0..rows {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += ta.data[i * cols + j];
                }
            }
            Tensor {
                shape: vec![cols],
                data: out,
            }
        } else {
            let mut out = vec![0.0; rows];
            for (i, o) in out.iter_mut().enumerate() {
                *o = ta.data[i * cols..(i + 1) * cols].iter().sum();
            }
            Tensor {
                shape: vec![rows],
                data: out,
            }
        };
        let rg = self.requires(a);
        self.push("sum_axis", value, rg, Op::SumAxis(a, axis))
    }

    /// Sum of all entries (scalar result).
    pub fn sum_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let total: f64 = self.nodes[a.0].value.data.iter().sum();
        let rg = self.requires(a);
        self.push("sum_all", Tensor::scalar(total), rg, Op::SumAll(a))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 2 {
            return Err(Self::mismatch("transpose", format!("shape {:?}", ta.shape)));
        }
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = ta.data[i * cols + j];
            }
        }
        let value = Tensor {
            shape: vec![cols, rows],
            data,
        };
        let rg = self.requires(a);
        self.push("transpose", value, rg, Op::Transpose(a))
    }

    /// Reinterprets the data under a new shape with the same length.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != ta.data.len() {
            return Err(Self::mismatch(
                "reshape",
                format!("{:?} -> {:?}", ta.shape, shape),
            ));
        }
        let value = Tensor {
            shape,
            data: ta.data.clone(),
        };
        let rg = self.requires(a);
        self.push("reshape", value, rg, Op::Reshape(a))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(Self::mismatch("concat_cols", "no inputs".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != 2 || t.shape[0] != rows {
                return Err(Self::mismatch(
                    "concat_cols",
                    format!("expected {rows} rows, got shape {:?}", t.shape),
                ));
            }
            total_cols += t.shape[1];
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let c = t.shape[1];
            for i in 0..rows {
                data[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(&t.data[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor {
            shape: vec![rows, total_cols],
            data,
        };
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push("concat_cols", value, rg, Op::ConcatCols(parts.to_vec()))
    }

    /// Reverse-mode pass from a scalar loss. Consumes the graph; gradients
    /// are reported for every `requires_grad` leaf reachable from `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients, DiffError> {
        let loss_len = self.nodes[loss.0].value.len();
        if loss_len != 1 {
            return Err(DiffError::NonScalarLoss { len: loss_len });
        }

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn send(nodes: &[Node], grads: &mut [Option<Vec<f64>>], target: Var, contribution: Vec<f64>) {
            if !nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contribution) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        }

        for idx in (0..=loss.0).rev() {
            if !nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(grad) = (match nodes[idx].op {
                Op::Leaf => grads[idx].clone(),
                _ => grads[idx].take(),
            }) else {
                continue;
            };
            let node = &nodes[idx];

            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (r, k, c) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; r * k];
                        matmul_nt_add(r, c, k, &grad, &tb.data, &mut da);
                        send(nodes, &mut grads, *a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * c];
                        matmul_tn_add(r, k, c, &ta.data, &grad, &mut db);
                        send(nodes, &mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(nodes, &mut grads, *a, grad.clone());
                    send(nodes, &mut grads, *b, grad);
                }
                Op::Sub(a, b) => {
                    send(nodes, &mut grads, *a, grad.clone());
                    send(nodes, &mut grads, *b, grad.iter().map(|g| -g).collect());
                }
                Op::AddScalar(a) => send(nodes, &mut grads, *a, grad),
                Op::Scale(a, c) => {
                    send(nodes, &mut grads, *a, grad.iter().map(|g| g * c).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        let da = grad.iter().zip(&tb.data).map(|(g, v)| g * v).collect();
                        send(nodes, &mut grads, *a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let db = grad.iter().zip(&ta.data).map(|(g, v)| g * v).collect();
                        send(nodes, &mut grads, *b, db);
                    }
                }
                Op::MulRow(m, v) => {
                    let (tm, tv) = (&nodes[m.0].value, &nodes[v.0].value);
                    let c = tm.shape[1];
                    if nodes[m.0].requires_grad {
                        let dm = grad
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g * tv.data[i % c])
                            .collect();
                        send(nodes, &mut grads, *m, dm);
                    }
                    if nodes[v.0].requires_grad {
                        let mut dv = vec![0.0; c];
                        for (i, g) in grad.iter().enumerate() {
                            dv[i % c] += g * tm.data[i];
                        }
                        send(nodes, &mut grads, *v, dv);
                    }
                }
                Op::AddRow(m, v) => {
                    let c = nodes[m.0].value.shape[1];
                    if nodes[m.0].requires_grad {
                        send(nodes, &mut grads, *m, grad.clone());
                    }
                    if nodes[v.0].requires_grad {
                        let mut dv = vec![0.0; c];
                        for (i, g) in grad.iter().enumerate() {
                            dv[i % c] += g;
                        }
                        send(nodes, &mut grads, *v, dv);
                    }
                }
                Op::Relu(a) => {
                    let ta = &nodes[a.0].value;
                    let da = grad
                        .iter()
                        .zip(&ta.data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(nodes, &mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    let da = grad.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect();
                    send(nodes, &mut grads, *a, da);
                }
                Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let mut da = vec![0.0; y.data.len()];
                    for lane in Self::softmax_lanes(y, *axis) {
                        let dot: f64 = lane.iter().map(|&i| grad[i] * y.data[i]).sum();
                        for &i in &lane {
                            da[i] = y.data[i] * (grad[i] - dot);
                        }
                    }
                    send(nodes, &mut grads, *a, da);
                }
                Op::SumAxis(a, axis) => {
                    let ta = &nodes[a.0].value;
                    let (rows, cols) = (ta.shape[0], ta.shape[1]);
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] = if *axis == 0 { grad[j] } else { grad[i] };
                        }
                    }
                    send(nodes, &mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let len = nodes[a.0].value.len();
                    send(nodes, &mut grads, *a, vec![grad[0]; len]);
                }
                Op::Transpose(a) => {
                    let (rows, cols) = {
                        let ta = &nodes[a.0].value;
                        (ta.shape[0], ta.shape[1])
                    };
                    // grad has the transposed shape [cols, rows].
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] = grad[j * rows + i];
                        }
                    }
                    send(nodes, &mut grads, *a, da);
                }
                Op::Reshape(a) => send(nodes, &mut grads, *a, grad),
                Op::ConcatCols(parts) => {
                    let rows = node.value.shape[0];
                    let total_cols = node.value.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = nodes[p.0].value.shape[1];
                        if nodes[p.0].requires_grad {
                            let mut dp = vec![0.0; rows * c];
                            for i in 0..rows {
                                dp[i * c..(i + 1) * c].copy_from_slice(
                                    &grad[i * total_cols + offset..i * total_cols + offset + c],
                                );
                            }
                            send(nodes, &mut grads, p, dp);
                        }
                        offset += c;
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(idx, g)| match (&self.nodes[idx].op, g) {
                (Op::Leaf, Some(data)) if self.nodes[idx].requires_grad => Some(Tensor {
                    shape: self.nodes[idx].value.shape.clone(),
                    data,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

// ---------------------------------------------------------------------------
// Multilayer perceptron: input -> hidden (ReLU) -> output. Three layers
// counting input and output, i.e. exactly two affine maps.
// ---------------------------------------------------------------------------

/// Two-affine-layer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    /// Initializes each affine map uniformly in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound1 = 1.0 / (input as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Tensor::uniform(vec![input, hidden], bound1, rng),
            b1: Tensor::uniform(vec![hidden], bound1, rng),
            w2: Tensor::uniform(vec![hidden, output], bound2, rng),
            b2: Tensor::uniform(vec![output], bound2, rng),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// An [`Mlp`] bound into a graph: parameter leaves plus the forward rule.
pub struct BoundMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundMlp {
    pub fn bind(graph: &mut Graph, mlp: &Mlp, trainable: bool) -> Result<Self, DiffError> {
        Ok(Self {
            w1: graph.leaf(mlp.w1.clone(), trainable)?,
            b1: graph.leaf(mlp.b1.clone(), trainable)?,
            w2: graph.leaf(mlp.w2.clone(), trainable)?,
            b2: graph.leaf(mlp.b2.clone(), trainable)?,
        })
    }

    /// `relu(x W1 + b1) W2 + b2` for a batch of rows `x`.
    pub fn forward(&self, graph: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let h = graph.matmul(x, self.w1)?;
        let h = graph.add_row(h, self.b1)?;
        let h = graph.relu(h)?;
        let out = graph.matmul(h, self.w2)?;
        graph.add_row(out, self.b2)
    }
}

// ---------------------------------------------------------------------------
// Adam optimizer.
// ---------------------------------------------------------------------------

/// Adam hyperparameters. Betas and epsilon use the textbook defaults.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_lens: &[usize]) -> Self {
        Self {
            config,
            m: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `params` and `grads` must line up with
    /// the lengths given at construction, in the same order.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), DiffError> {
        let mut slices: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
        let grad_slices: Vec<&[f64]> = grads.iter().map(|t| t.data()).collect();
        self.step_slices(&mut slices, &grad_slices)
    }

    /// Same update on raw slices.
    pub fn step_slices(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<(), DiffError> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (index, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.len() != self.m[index].len() || grad.len() != self.m[index].len() {
                return Err(DiffError::AdamShape { index });
            }
            let m = &mut self.m[index];
            let v = &mut self.v[index];
            for ((p, &g), (mi, vi)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

/// Compares the backward-pass gradient of `f` at `x` against central finite
/// differences with the given step, returning the worst per-coordinate
/// relative error `|ad - fd| / max(|ad|, |fd|, 1e-3)`. The floor keeps
/// coordinates whose true derivative is near zero from being judged by
/// finite-difference noise alone.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, DiffError>,
{
    let mut graph = Graph::new();
    let xv = graph.leaf(x.clone(), true)?;
    let y = f(&mut graph, xv)?;
    let mut grads = graph.backward(y)?;
    let analytic = grads.take(xv).expect("x requires grad");

    let eval = |point: &Tensor| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let v = g.leaf(point.clone(), false)?;
        let out = f(&mut g, v)?;
        let t = g.value(out);
        if !t.is_scalar() {
            return Err(DiffError::NonScalarLoss { len: t.len() });
        }
        Ok(t.item())
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = original - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = original;
        let fd = (plus - minus) / (2.0 * step);
        let ad = analytic.data()[i];
        let denom = ad.abs().max(fd.abs()).max(1e-3);
        max_err = max_err.max((ad - fd).abs() / denom);
    }
    Ok(max_err)
}

// ---------------------------------------------------------------------------
// Checkpoints: a line-based text manifest of named tensors plus free-form
// metadata. Values are written in scientific notation with 17 significant
// digits, so reading a checkpoint back is bit-exact.
//
//   tsplearn-tensors v1
//   meta <key> <value>
//   tensor <name> <rank> <dim...>
//   <space-separated row-major values>
// ---------------------------------------------------------------------------

const MANIFEST_HEADER: &str = "tsplearn-tensors v1";

pub fn write_manifest(
    path: impl AsRef<Path>,
    meta: &[(String, String)],
    tensors: &[(String, &Tensor)],
) -> Result<(), DiffError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{MANIFEST_HEADER}")?;
    for (key, value) in meta {
        writeln!(out, "meta {key} {value}")?;
    }
    for (name, tensor) in tensors {
        write!(out, "tensor {name} {}", tensor.shape().len())?;
        for d in tensor.shape() {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
        let mut first = true;
        for v in tensor.data() {
            if !first {
                write!(out, " ")?;
            }
            write!(out, "{v:.16e}")?;
            first = false;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(
    path: impl AsRef<Path>,
) -> Result<(Vec<(String, String)>, Vec<(String, Tensor)>), DiffError> {
    let err = |line: usize, message: &str| DiffError::Checkpoint {
        line,
        message: message.to_string(),
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file"))?;
    if header? != MANIFEST_HEADER {
        return Err(err(1, "unrecognized header"));
    }

    let mut meta = Vec::new();
    let mut tensors = Vec::new();
    while let Some((idx, line)) = lines.next() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ' ');
        match parts.next() {
            Some("meta") => {
                let rest = parts.next().ok_or_else(|| err(line_no, "meta needs a key"))?;
                let (key, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| err(line_no, "meta needs a value"))?;
                meta.push((key.to_string(), value.to_string()));
            }
            Some("tensor") => {
                let rest = parts.next().ok_or_else(|| err(line_no, "tensor needs a name"))?;
                let mut fields = rest.split_whitespace();
                let name = fields
                    .next()
                    .ok_or_else(|| err(line_no, "tensor needs a name"))?
                    .to_string();
                let rank: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| err(line_no, "bad tensor rank"))?;
                let shape: Vec<usize> = fields
                    .map(|f| f.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err(line_no, "bad tensor dimension"))?;
                if shape.len() != rank {
                    return Err(err(line_no, "rank does not match dimensions"));
                }
                let (value_idx, values_line) = lines
                    .next()
                    .ok_or_else(|| err(line_no, "missing tensor values"))?;
                let values_line = values_line?;
                let data: Vec<f64> = values_line
                    .split_whitespace()
                    .map(|f| f.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err(value_idx + 1, "bad tensor value"))?;
                let tensor =
                    Tensor::new(shape, data).map_err(|e| err(value_idx + 1, &e.to_string()))?;
                tensors.push((name, tensor));
            }
            _ => return Err(err(line_no, "expected `meta` or `tensor`")),
        }
    }
    Ok((meta, tensors))
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
        let mut g = Graph::new();
        let eye = g
            .constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
            .unwrap();
        let a = g
            .constant(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap())
            .unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap(), true)
            .unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let gx = grads.take(x).unwrap();
        assert_eq!(gx.data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(DiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        let y = g.mul(x, c).unwrap();
        let loss = g.sum_all(y).unwrap();
        let mut grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.take(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut g = Graph::new();
        let res = g.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap(), false);
        assert!(matches!(res, Err(DiffError::NonFinite { .. })));
    }

    #[test]
    fn overflow_is_trapped() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1], vec![f64::MAX]).unwrap()).unwrap();
        let y = g.scale(x, 2.0);
        assert!(matches!(y, Err(DiffError::NonFinite { .. })));
    }

    #[test]
    fn quadratic_form_gradcheck_is_tight() {
        // f(x) = sum((x A) * x): central differences are exact up to roundoff.
        let a = Tensor::new(vec![3, 3], vec![2., 1., 0., 1., 3., 0.5, 0., 0.5, 1.]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.7, -1.2, 0.4]).unwrap();
        let err = finite_difference_check(
            |g, xv| {
                let av = g.constant(a.clone())?;
                let xa = g.matmul(xv, av)?;
                let prod = g.mul(xa, xv)?;
                g.sum_all(prod)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn composite_ops_gradcheck() {
        // Touches matmul, concat, transpose, softmax, sigmoid, relu,
        // row broadcasts, reshape, sums.
        let mut r = rng(17);
        let w = Tensor::uniform(vec![4, 3], 0.7, &mut r);
        let gate = Tensor::uniform(vec![3], 0.9, &mut r);
        let x = Tensor::uniform(vec![2, 4], 1.0, &mut r);
        let err = finite_difference_check(
            |g, xv| {
                let wv = g.constant(w.clone())?;
                let gv = g.constant(gate.clone())?;
                let h = g.matmul(xv, wv)?; // [2,3]
                let h = g.add_row(h, gv)?;
                let a = g.relu(h)?;
                let b = g.sigmoid(h)?;
                let cat = g.concat_cols(&[a, b])?; // [2,6]
                let t = g.transpose(cat)?; // [6,2]
                let sm = g.softmax(t, 0)?;
                let back = g.transpose(sm)?;
                let half = g.constant(Tensor::new(vec![6], vec![0.5; 6]).unwrap())?;
                let gated = g.mul_row(back, half)?;
                let col = g.sum_axis(gated, 0)?; // [6]
                let reshaped = g.reshape(col, vec![1, 6])?;
                let row = g.sum_axis(reshaped, 1)?; // [1]
                let scaled = g.scale(row, 1.7)?;
                let shifted = g.add_scalar(scaled, 0.3)?;
                g.sum_all(shifted)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn mlp_forward_matches_manual_computation() {
        let mut r = rng(3);
        let mlp = Mlp::init(2, 3, 2, &mut r);
        let mut g = Graph::new();
        let bound = BoundMlp::bind(&mut g, &mlp, false).unwrap();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap()).unwrap();
        let y = bound.forward(&mut g, x).unwrap();

        let mut hidden = vec![0.0; 3];
        for (h, slot) in hidden.iter_mut().enumerate() {
            let mut acc = mlp.b1.data()[h];
            for (i, xv) in [0.3, -0.8].iter().enumerate() {
                acc += xv * mlp.w1.data()[i * 3 + h];
            }
            *slot = acc.max(0.0);
        }
        for o in 0..2 {
            let mut acc = mlp.b2.data()[o];
            for (h, hv) in hidden.iter().enumerate() {
                acc += hv * mlp.w2.data()[h * 2 + o];
            }
            assert!((g.value(y).data()[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(AdamConfig::new(0.1), &[3]);
        state.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let lr = 0.05;
        let mut p = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.3, -2.0]).unwrap();
        let mut state = AdamState::new(AdamConfig::new(lr), &[2]);
        state.step(&mut [&mut p], &[&g]).unwrap();
        for (i, &gv) in g.data().iter().enumerate() {
            let expected = 1.0 - lr * gv / (gv.abs() + 1e-8);
            assert!((p.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Tensor::new(vec![2], vec![0.2, -0.7]).unwrap();
            let mut state = AdamState::new(AdamConfig::new(0.01), &[2]);
            for step in 0..50 {
                let g = Tensor::new(vec![2], vec![(step as f64).sin(), 0.3]).unwrap();
                state.step(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_shape_change() {
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(AdamConfig::new(0.1), &[2]);
        assert!(matches!(
            state.step(&mut [&mut p], &[&g]),
            Err(DiffError::AdamShape { .. })
        ));
    }

    #[test]
    fn manifest_round_trip_is_bit_exact() {
        let mut r = rng(11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let t1 = Tensor::uniform(vec![3, 4], 2.0, &mut r);
        let t2 = Tensor::uniform(vec![5], 0.001, &mut r);
        let meta = vec![
            ("d".to_string(), "8".to_string()),
            ("note".to_string(), "free text with spaces".to_string()),
        ];
        let tensors = vec![("layer.w".to_string(), &t1), ("layer.b".to_string(), &t2)];
        write_manifest(&path, &meta, &tensors).unwrap();
        let (meta_back, tensors_back) = read_manifest(&path).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(tensors_back.len(), 2);
        assert_eq!(tensors_back[0].0, "layer.w");
        assert_eq!(tensors_back[0].1, t1);
        assert_eq!(tensors_back[1].1, t2);

        // Rewrite is byte-identical.
        let bytes1 = std::fs::read(&path).unwrap();
        write_manifest(
            &path,
            &meta_back,
            &[
                ("layer.w".to_string(), &tensors_back[0].1),
                ("layer.b".to_string(), &tensors_back[1].1),
            ],
        )
        .unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn manifest_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "tsplearn-tensors v1\ntensor w 2 2 2\n1.0 2.0 3.0\n").unwrap();
        match read_manifest(&path) {
            Err(DiffError::Checkpoint { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        std::fs::write(&path, "not a manifest\n").unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(DiffError::Checkpoint { line: 1, .. })
        ));
    }
}
