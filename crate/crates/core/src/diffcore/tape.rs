//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value; inputs always
//! precede their consumers, so the node order is a topological order and a
//! single reverse sweep visits each node exactly once.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nt, gemm_tn, l2_norm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalarVar(Var, Var),
    DivScalarVar(Var, Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    ClampMin(Var, f64),
    Pow(Var, f64),
    LayerNorm(Var),
    RowSoftmax(Var, f64),
    RowL2Normalize(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Per-row statistics kept for layer norm (1/σ) and L2 normalisation (‖x‖).
    saved: Vec<f64>,
}

/// Records a forward computation and differentiates it.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: HashMap<usize, Tensor>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: HashMap::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no leaf tracks gradients; used for inference.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Vec<f64>) -> Var {
        let requires_grad = self.grad_enabled && self.op_requires_grad(&op);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulScalarVar(a, b)
            | Op::DivScalarVar(a, b) => rg(a) || rg(b),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(rg),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Gelu(a)
            | Op::ClampMin(a, _)
            | Op::Pow(a, _)
            | Op::LayerNorm(a)
            | Op::RowSoftmax(a, _)
            | Op::RowL2Normalize(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SelectRows(a, _)
            | Op::Reshape(a) => rg(a),
        }
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, Vec::new())
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, Vec::new());
        self.nodes[v.0].requires_grad = self.grad_enabled;
        v
    }

    /// Leaf bound to a stored parameter; frozen parameters become constants.
    /// Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let value = p.value.clone();
        let v = if p.trainable {
            self.variable(value)
        } else {
            self.constant(value)
        };
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.grad(*v))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value, Vec::new())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(op, value, Vec::new()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, Vec::new()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), value, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    fn row_operand(&self, a: Var, r: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.matrix_dims(a, op)?;
        if self.value(r).numel() != n {
            return Err(Error::dim(op, self.shape(a), self.shape(r)));
        }
        Ok((m, n))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_operand(a, r, "add_row")?;
        let rv = self.value(r).data().to_vec();
        let mut value = self.value(a).clone();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += rv[i % n];
        }
        Ok(self.push(Op::AddRow(a, r), value, Vec::new()))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_operand(a, r, "mul_row")?;
        let rv = self.value(r).data().to_vec();
        let mut value = self.value(a).clone();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x *= rv[i % n];
        }
        Ok(self.push(Op::MulRow(a, r), value, Vec::new()))
    }

    fn scalar_operand(&self, s: Var, op: &'static str) -> Result<f64> {
        self.value(s)
            .item()
            .ok_or_else(|| Error::dim(op, &[1], self.shape(s)))
    }

    /// `a · s` for a single-element `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand(s, "mul_scalar_var")?;
        Ok(self.unary(a, Op::MulScalarVar(a, s), |x| x * sv))
    }

    /// `a / s` for a single-element `s`.
    pub fn div_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand(s, "div_scalar_var")?;
        if sv == 0.0 {
            return Err(Error::param("division by a zero scalar"));
        }
        Ok(self.unary(a, Op::DivScalarVar(a, s), |x| x / sv))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log σ(x)`, accurate for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    /// Elementwise `x^p` for nonnegative inputs.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Pow(a, p), |x| x.powf(p))
    }

    /// Per-row standardisation (zero mean, unit variance, ε = 1e-5), no affine.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "layer_norm")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().fold(0.0, |s, &v| s + v) / n as f64;
            let var = row.iter().fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::LayerNorm(a), value, inv_std))
    }

    pub fn row_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let value = self.value(a).row_softmax(temperature)?;
        Ok(self.push(Op::RowSoftmax(a, temperature), value, Vec::new()))
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_l2_normalize()?;
        let orig = self.value(a);
        let norms = (0..orig.rows()).map(|i| l2_norm(orig.row(i))).collect();
        Ok(self.push(Op::RowL2Normalize(a), value, norms))
    }

    /// Cosine similarity between the columns of a `d×C` matrix.
    pub fn cosine_similarity_matrix(&mut self, z: Var) -> Result<Var> {
        let zt = self.transpose(z)?;
        let unit = self.row_l2_normalize(zt)?;
        let unit_t = self.transpose(unit)?;
        self.matmul(unit, unit_t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(a), value, Vec::new())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::param("concat of zero tensors"))?;
        let (_, n) = self.matrix_dims(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::param("concat of zero tensors"))?;
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, Vec::new()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", &[m, n], &[start, len]));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], data)?;
        Ok(self.push(Op::SliceRows(a, start), value, Vec::new()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self.push(Op::SliceCols(a, start), value, Vec::new()))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "select_rows")?;
        if indices.is_empty() || indices.iter().any(|&i| i >= m) {
            return Err(Error::dim("select_rows", &[m, n], &[indices.len()]));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![indices.len(), n], data)?;
        Ok(self.push(Op::SelectRows(a, indices.to_vec()), value, Vec::new()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value, Vec::new()))
    }

    /// Reverse sweep from a scalar. Gradients accumulate into differentiable
    /// leaves across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.grads.get_mut(&i) {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        let t = Tensor::new(node.value.shape().to_vec(), g)?;
                        self.grads.insert(i, t);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: &Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let elementwise = |x: &[f64], d: &mut [f64], df: &dyn Fn(f64, f64) -> f64| {
            for ((o, &gi), (&xi, &yi)) in d.iter_mut().zip(g).zip(x.iter().zip(y)) {
                *o += gi * df(xi, yi);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                acc(*a, &mut |d| gemm_nt(g, val(b), d, m, n, k));
                acc(*b, &mut |d| gemm_tn(val(a), g, d, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[c * m + r] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(*a, &mut |d| {
                    for ((o, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::AddRow(a, r) => {
                let n = self.nodes[r.0].value.numel();
                acc(*a, &mut |d| add_into(d, g));
                acc(*r, &mut |d| {
                    for (idx, gi) in g.iter().enumerate() {
                        d[idx % n] += gi;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let n = self.nodes[r.0].value.numel();
                let (av, rv) = (val(a), val(r));
                acc(*a, &mut |d| {
                    for (idx, (o, gi)) in d.iter_mut().zip(g).enumerate() {
                        *o += gi * rv[idx % n];
                    }
                });
                acc(*r, &mut |d| {
                    for (idx, (gi, ai)) in g.iter().zip(av).enumerate() {
                        d[idx % n] += gi * ai;
                    }
                });
            }
            Op::MulScalarVar(a, s) => {
                let sv = val(s)[0];
                let av = val(a);
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * sv));
                acc(*s, &mut |d| d[0] += dot(g, av));
            }
            Op::DivScalarVar(a, s) => {
                let sv = val(s)[0];
                let av = val(a);
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(o, gi)| *o += gi / sv));
                acc(*s, &mut |d| d[0] -= dot(g, av) / (sv * sv));
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| elementwise(val(a), d, &|_, yi| yi * (1.0 - yi))),
            Op::LogSigmoid(a) => acc(*a, &mut |d| elementwise(val(a), d, &|xi, _| sigmoid(-xi))),
            Op::Tanh(a) => acc(*a, &mut |d| elementwise(val(a), d, &|_, yi| 1.0 - yi * yi)),
            Op::Log(a) => acc(*a, &mut |d| elementwise(val(a), d, &|xi, _| 1.0 / xi)),
            Op::Exp(a) => acc(*a, &mut |d| elementwise(val(a), d, &|_, yi| yi)),
            Op::Relu(a) => acc(*a, &mut |d| {
                elementwise(val(a), d, &|xi, _| if xi > 0.0 { 1.0 } else { 0.0 })
            }),
            Op::LeakyRelu(a, slope) => acc(*a, &mut |d| {
                elementwise(val(a), d, &|xi, _| if xi > 0.0 { 1.0 } else { *slope })
            }),
            Op::Gelu(a) => acc(*a, &mut |d| elementwise(val(a), d, &|xi, _| gelu_grad(xi))),
            Op::ClampMin(a, lo) => acc(*a, &mut |d| {
                elementwise(val(a), d, &|xi, _| if xi >= *lo { 1.0 } else { 0.0 })
            }),
            Op::Pow(a, p) => acc(*a, &mut |d| elementwise(val(a), d, &|xi, _| pow_grad(xi, *p))),
            Op::LayerNorm(a) => {
                let n = node.value.cols();
                acc(*a, &mut |d| {
                    for (r, &is) in node.saved.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mg = gr.iter().fold(0.0, |s, &v| s + v) / n as f64;
                        let mgy = dot(gr, yr) / n as f64;
                        for ((o, &gi), &yi) in d[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                            *o += is * (gi - mg - yi * mgy);
                        }
                    }
                });
            }
            Op::RowSoftmax(a, t) => {
                let n = node.value.cols();
                acc(*a, &mut |d| {
                    for r in 0..node.value.rows() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let gy = dot(gr, yr);
                        for ((o, &gi), &yi) in d[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - gy) / t;
                        }
                    }
                });
            }
            Op::RowL2Normalize(a) => {
                let n = node.value.cols();
                acc(*a, &mut |d| {
                    for (r, &norm) in node.saved.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let gy = dot(gr, yr);
                        for ((o, &gi), &yi) in d[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                            *o += (gi - yi * gy) / norm;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(*p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut col = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    acc(*p, &mut |d| {
                        for r in 0..m {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * n + col..r * n + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.value.cols();
                acc(*a, &mut |d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (m, w) = (node.value.rows(), node.value.cols());
                let n = self.nodes[a.0].value.cols();
                acc(*a, &mut |d| {
                    for r in 0..m {
                        add_into(&mut d[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SelectRows(a, indices) => {
                let n = node.value.cols();
                acc(*a, &mut |d| {
                    for (k, &src) in indices.iter().enumerate() {
                        add_into(&mut d[src * n..(src + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
        }
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn pow_grad(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else if x == 0.0 {
        if p == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        p * x.powf(p - 1.0)
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}
