//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Graph`]; node indices are a
//! topological order by construction, so the backward pass is a single
//! reverse sweep. Leaf gradients accumulate across calls to
//! [`Graph::backward`] until [`Graph::zero_grad`] is called.

use crate::error::{Error, Result};
use crate::tensor::{
    check_finite, dot, log_sigmoid_scalar, logsumexp_raw, matmul_nt_raw, matmul_raw, matmul_tn_raw,
    norm, sigmoid_scalar, softmax_in_place, Tensor, COSINE_EPS,
};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSigmoid(Var),
    Sum(Var),
    RowSums(Var),
    Softmax(Var),
    LayerNorm(Var),
    Gather(Var, Vec<usize>),
    Rows(Var, usize),
    StackRows(Vec<Var>),
    Concat(Vec<Var>),
    Cosine(Var, Var),
    LogSumExp(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// True when `target` is reachable from `root` through differentiable edges.
    pub fn depends_on(&self, root: Var, target: Var) -> bool {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            if v == target {
                return true;
            }
            if v.0 < target.0 || seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            stack.extend(self.parents(v));
        }
        false
    }

    fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LogSigmoid(a)
            | Op::Sum(a)
            | Op::RowSums(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::Gather(a, _)
            | Op::Rows(a, _)
            | Op::LogSumExp(a) => vec![*a],
            Op::StackRows(vs) | Op::Concat(vs) => vs.clone(),
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        check_finite(value.data(), name)?;
        let needs_grad = self.parents_need_grad(&op);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn parents_need_grad(&self, op: &Op) -> bool {
        let need = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Cosine(a, b) => need(a) || need(b),
            Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LogSigmoid(a)
            | Op::Sum(a)
            | Op::RowSums(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::Gather(a, _)
            | Op::Rows(a, _)
            | Op::LogSumExp(a) => need(a),
            Op::StackRows(vs) | Op::Concat(vs) => vs.iter().any(need),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_len(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::Dimension(format!(
                "{op}: operands of shape {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(out, op, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let c = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, c)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dimensions differ: {m}×{k} · ({n}×{k2})ᵀ"
            )));
        }
        let c = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, c)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(row).len() != n {
            return Err(Error::Dimension(format!(
                "row broadcast of length {} onto {m}×{n}",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r) {
                if mul {
                    *v *= b;
                } else {
                    *v += b;
                }
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        if mul {
            self.push(out, Op::MulRow(x, row), "mul_row")
        } else {
            self.push(out, Op::AddRow(x, row), "add_row")
        }
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_broadcast(x, bias, false)
    }

    /// `x[m×n] ⊙ g[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.row_broadcast(x, gain, true)
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map(x, Op::Affine(x, scale), "affine", |v| scale * v + shift)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid_scalar)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::LogSigmoid(x), "log_sigmoid", log_sigmoid_scalar)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// `[m×n] → [m]`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let sums = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        self.push(Tensor::vector(sums), Op::RowSums(x), "row_sums")
    }

    /// Row-wise dot product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.row_sums(p)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// out and comes back as exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if n == 0 {
            return Err(Error::Input("softmax of an empty row".into()));
        }
        let mut data = t.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let live = if causal { (i + 1).min(n) } else { n };
            softmax_in_place(&mut row[..live]);
            row[live..].iter_mut().for_each(|v| *v = 0.0);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Per-row standardisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::LayerNorm(x), "layer_norm")
    }

    /// Selects rows of a table (embedding lookup).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Input(format!(
                    "row index {i} out of range for {m} rows"
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), n, data)?;
        self.push(out, Op::Gather(table, indices.to_vec()), "gather")
    }

    /// Contiguous row slice `[start, end)`.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if start >= end || end > m {
            return Err(Error::Dimension(format!(
                "row slice {start}..{end} of {m} rows"
            )));
        }
        let out = Tensor::matrix(end - start, n, t.data()[start * n..end * n].to_vec())?;
        self.push(out, Op::Rows(x, start), "rows")
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.rows(x, i, i + 1)
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.dims(p).1,
            None => return Err(Error::Input("stack of zero tensors".into())),
        };
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::Dimension(format!(
                    "stack_rows: {c} columns, expected {n}"
                )));
            }
            data.extend_from_slice(self.value(p).data());
            m += r;
        }
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::StackRows(parts.to_vec()),
            "stack_rows",
        )
    }

    /// Flattens and concatenates into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), "concat")
    }

    /// Cosine similarity of two flattened tensors; zero (with zero
    /// gradient) when either norm is below [`COSINE_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "cosine")?;
        let c = crate::tensor::cosine_sim(self.value(a).data(), self.value(b).data())?;
        self.push(Tensor::scalar(c), Op::Cosine(a, b), "cosine")
    }

    /// `log Σ exp(x)` over all elements.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Error::Input("logsumexp of an empty tensor".into()));
        }
        let v = logsumexp_raw(self.value(x).data());
        self.push(Tensor::scalar(v), Op::LogSumExp(x), "logsumexp")
    }

    /// Reverse sweep from a scalar root; adds `∂root/∂leaf` into every
    /// reachable trainable leaf's gradient buffer.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Usage(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            if let Op::Leaf = op {
                self.nodes[idx].value.accumulate_grad(&g)?;
                continue;
            }
            self.propagate(idx, &op, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                send(*a, matmul_nt_raw(g, val(*b), m, n, k));
                send(*b, matmul_tn_raw(val(*a), g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                send(*a, matmul_raw(g, val(*b), m, n, k));
                send(*b, matmul_tn_raw(g, val(*a), m, n, k));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                send(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(x, r) => {
                let n = self.dims(*x).1;
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                send(*x, g.to_vec());
                send(*r, gr);
            }
            Op::MulRow(x, r) => {
                let n = self.dims(*x).1;
                let (xv, rv) = (val(*x), val(*r));
                let mut gr = vec![0.0; n];
                let mut gx = vec![0.0; g.len()];
                for (i, (gc, xc)) in g.chunks(n).zip(xv.chunks(n)).enumerate() {
                    for j in 0..n {
                        gr[j] += gc[j] * xc[j];
                        gx[i * n + j] = gc[j] * rv[j];
                    }
                }
                send(*x, gx);
                send(*r, gr);
            }
            Op::Affine(x, scale) => send(*x, g.iter().map(|v| v * scale).collect()),
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                send(*x, d);
            }
            Op::Tanh(x) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                send(*x, d);
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                send(*x, d);
            }
            Op::LogSigmoid(x) => {
                // d/dx log σ(x) = σ(-x)
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| g * sigmoid_scalar(-v))
                    .collect();
                send(*x, d);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::RowSums(x) => {
                let n = self.dims(*x).1;
                let d = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, n))
                    .collect();
                send(*x, d);
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let mut d = vec![0.0; g.len()];
                for (i, (gc, yc)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let inner = dot(gc, yc);
                    for j in 0..n {
                        d[i * n + j] = yc[j] * (gc[j] - inner);
                    }
                }
                send(*x, d);
            }
            Op::LayerNorm(x) => {
                let n = out.cols() as f64;
                let cols = out.cols();
                let mut d = vec![0.0; g.len()];
                for (i, ((gc, yc), xc)) in g
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(val(*x).chunks(cols))
                    .enumerate()
                {
                    let mean = xc.iter().sum::<f64>() / n;
                    let var = xc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let g_mean = gc.iter().sum::<f64>() / n;
                    let gy_mean = dot(gc, yc) / n;
                    for j in 0..cols {
                        d[i * cols + j] = inv * (gc[j] - g_mean - yc[j] * gy_mean);
                    }
                }
                send(*x, d);
            }
            Op::Gather(table, indices) => {
                let n = self.dims(*table).1;
                let mut d = vec![0.0; self.value(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        d[i * n + j] += g[r * n + j];
                    }
                }
                send(*table, d);
            }
            Op::Rows(x, start) => {
                let n = self.dims(*x).1;
                let mut d = vec![0.0; self.value(*x).len()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                send(*x, d);
            }
            Op::StackRows(parts) | Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (na, nb) = (norm(av), norm(bv));
                if na < COSINE_EPS || nb < COSINE_EPS {
                    return;
                }
                let c = out.item();
                let gs = g[0];
                let da = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| gs * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let db = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| gs * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                send(*a, da);
                send(*b, db);
            }
            Op::LogSumExp(x) => {
                let mut p = val(*x).to_vec();
                softmax_in_place(&mut p);
                send(*x, p.iter().map(|v| v * g[0]).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` at the given leaf values; returns the
    /// largest relative error over all coordinates.
    fn fd_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let h = 1e-5;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = f(&mut g, &vars);
        g.backward(root).unwrap();
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
            let r = f(&mut g, &vars);
            g.scalar(r)
        };
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g
                .grad(vars[k])
                .map(<[f64]>::to_vec)
                .unwrap_or(vec![0.0; t.len()]);
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![0.5, 1.5]));
        let y = g.affine(w, 3.0, 1.0).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0, 6.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(w, c).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn matmul_grad_is_column_sums_of_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        // d sum(AB) / dA[i][p] = Σ_j B[p][j]
        let row_sums: Vec<f64> = (0..4).map(|p| b.row(p).iter().sum()).collect();
        for i in 0..3 {
            for (p, s) in row_sums.iter().enumerate() {
                assert!((g.grad(va).unwrap()[i * 4 + p] - s).abs() < 1e-12);
            }
        }
        let err = fd_check(&[a, b], &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sigmoid_chain_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let w = rand_tensor(&mut rng, vec![5]);
            let v = rand_tensor(&mut rng, vec![5]);
            let err = fd_check(&[w, v], &|g, x| {
                let s = g.sigmoid(x[0]).unwrap();
                let p = g.mul(s, x[1]).unwrap();
                g.sum(p).unwrap()
            });
            assert!(err < 1e-4, "{err}");
        }
    }

    /// Every differentiable op, composed into a scalar with a random
    /// projection so that no gradient is trivially uniform.
    #[test]
    fn every_op_matches_fd_at_random_points() {
        type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            (
                "matmul",
                vec![vec![3, 4], vec![4, 2]],
                Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
            ),
            (
                "matmul_nt",
                vec![vec![3, 4], vec![2, 4]],
                Box::new(|g, v| g.matmul_nt(v[0], v[1]).unwrap()),
            ),
            (
                "add",
                vec![vec![2, 3], vec![2, 3]],
                Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            ),
            (
                "sub",
                vec![vec![2, 3], vec![2, 3]],
                Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
            ),
            (
                "mul",
                vec![vec![2, 3], vec![2, 3]],
                Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            ),
            (
                "add_row",
                vec![vec![3, 4], vec![4]],
                Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()),
            ),
            (
                "mul_row",
                vec![vec![3, 4], vec![4]],
                Box::new(|g, v| g.mul_row(v[0], v[1]).unwrap()),
            ),
            (
                "affine",
                vec![vec![2, 3]],
                Box::new(|g, v| g.affine(v[0], -0.7, 0.2).unwrap()),
            ),
            (
                "sigmoid",
                vec![vec![2, 3]],
                Box::new(|g, v| g.sigmoid(v[0]).unwrap()),
            ),
            (
                "tanh",
                vec![vec![2, 3]],
                Box::new(|g, v| g.tanh(v[0]).unwrap()),
            ),
            (
                "relu",
                vec![vec![2, 3]],
                Box::new(|g, v| g.relu(v[0]).unwrap()),
            ),
            (
                "log_sigmoid",
                vec![vec![2, 3]],
                Box::new(|g, v| g.log_sigmoid(v[0]).unwrap()),
            ),
            (
                "row_sums",
                vec![vec![3, 4]],
                Box::new(|g, v| g.row_sums(v[0]).unwrap()),
            ),
            (
                "softmax",
                vec![vec![3, 4]],
                Box::new(|g, v| g.softmax_rows(v[0], false).unwrap()),
            ),
            (
                "causal_softmax",
                vec![vec![4, 4]],
                Box::new(|g, v| g.softmax_rows(v[0], true).unwrap()),
            ),
            (
                "layer_norm",
                vec![vec![3, 5]],
                Box::new(|g, v| g.layer_norm(v[0]).unwrap()),
            ),
            (
                "gather",
                vec![vec![5, 3]],
                Box::new(|g, v| g.gather(v[0], &[4, 1, 1, 0]).unwrap()),
            ),
            (
                "rows",
                vec![vec![5, 3]],
                Box::new(|g, v| g.rows(v[0], 1, 4).unwrap()),
            ),
            (
                "stack_rows",
                vec![vec![2, 3], vec![1, 3]],
                Box::new(|g, v| g.stack_rows(&[v[0], v[1], v[0]]).unwrap()),
            ),
            (
                "concat",
                vec![vec![2], vec![3]],
                Box::new(|g, v| g.concat(&[v[1], v[0]]).unwrap()),
            ),
            (
                "cosine",
                vec![vec![4], vec![4]],
                Box::new(|g, v| g.cosine(v[0], v[1]).unwrap()),
            ),
            (
                "logsumexp",
                vec![vec![2, 3]],
                Box::new(|g, v| g.logsumexp(v[0]).unwrap()),
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, shapes, build) in &cases {
            for _ in 0..10 {
                let mut inputs: Vec<Tensor> = shapes
                    .iter()
                    .map(|s| rand_tensor(&mut rng, s.clone()))
                    .collect();
                // projection weights sized after a dry run
                let out_len = {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
                    let out = build(&mut g, &vars);
                    g.value(out).len()
                };
                let proj = rand_tensor(&mut rng, vec![out_len]);
                inputs.push(proj);
                let n_in = shapes.len();
                let err = fd_check(&inputs, &|g, v| {
                    let out = build(g, &v[..n_in]);
                    let flat = g.concat(&[out]).unwrap();
                    let p = g.mul(flat, v[n_in]).unwrap();
                    g.sum(p).unwrap()
                });
                assert!(err < 1e-4, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn shared_subexpression_matches_tree() {
        // y = (x ⊙ x) + (x ⊙ x) through one shared node vs two copies
        let x0 = Tensor::vector(vec![0.4, -1.3, 2.2]);
        let mut dag = Graph::new();
        let x = dag.leaf(x0.clone());
        let sq = dag.mul(x, x).unwrap();
        let y = dag.add(sq, sq).unwrap();
        let s = dag.sum(y).unwrap();
        dag.backward(s).unwrap();

        let mut tree = Graph::new();
        let x1 = tree.leaf(x0.clone());
        let x2 = tree.leaf(x0.clone());
        let x3 = tree.leaf(x0.clone());
        let x4 = tree.leaf(x0);
        let a = tree.mul(x1, x2).unwrap();
        let b = tree.mul(x3, x4).unwrap();
        let y = tree.add(a, b).unwrap();
        let s = tree.sum(y).unwrap();
        tree.backward(s).unwrap();
        let summed: Vec<f64> = (0..3)
            .map(|i| {
                [x1, x2, x3, x4]
                    .iter()
                    .map(|v| tree.grad(*v).unwrap()[i])
                    .sum()
            })
            .collect();
        for (d, t) in dag.grad(x).unwrap().iter().zip(&summed) {
            assert!((d - t).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_of_zero_vector_has_zero_grad() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = g.cosine(a, b).unwrap();
        assert_eq!(g.scalar(c), 0.0);
        g.backward(c).unwrap();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 3, vec![1.0; 9]).unwrap());
        let y = g.softmax_rows(x, true).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn depends_on_follows_edges() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0));
        let b = g.leaf(Tensor::scalar(2.0));
        let c = g.affine(a, 2.0, 0.0).unwrap();
        assert!(g.depends_on(c, a));
        assert!(!g.depends_on(c, b));
    }

    #[test]
    fn shape_errors_surface() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        assert!(g.gather(a, &[5]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-500.0f64..500.0, 1..20)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(xs));
            let y = g.softmax_rows(x, false).unwrap();
            let v = g.value(y).data();
            proptest::prop_assert!(v.iter().all(|p| *p >= 0.0));
            proptest::prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
