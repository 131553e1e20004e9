//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every op appends a node holding its output value; [`Tape::backward`] walks
//! the nodes in exact reverse order and accumulates gradients additively.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor added inside the log of kernel pooling.
pub const KERNEL_LOG_FLOOR: f64 = 1e-10;
/// Variance floor for batch normalization.
pub const BN_VAR_FLOOR: f64 = 1e-5;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddScalarVar(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    MulRowsConst(Var, Vec<f64>),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: Axis,
    },
    ScaledDotSoftmax {
        q: Var,
        k: Var,
        scale: f64,
    },
    CosineRows(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        window: usize,
        groups: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    KernelPool {
        x: Var,
        start: usize,
        end: usize,
        mask: Vec<bool>,
        mus: Vec<f64>,
        sigmas: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        inv_std: f64,
        grad: BnGrad,
    },
    SegmentSum {
        x: Var,
        lens: Vec<usize>,
    },
    Select {
        x: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy)]
enum BnGrad {
    /// Statistics are constants.
    Fixed,
    /// Differentiate through batch mean and variance.
    Batch,
    /// Variance hit its floor; only the batch mean is differentiated.
    MeanOnly,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; all zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` with `a: k×m`, `b: k×n`.
fn matmul_tn_kernel(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` with `a: m×k`, `b: n×k`.
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn softmax_in_place(v: &mut [f64], mask: Option<&[bool]>) {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        if keep(i) && *x > max {
            max = *x;
        }
    }
    if max == f64::NEG_INFINITY {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (i, x) in v.iter_mut().enumerate() {
        if keep(i) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

fn row_norms(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| x[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose [`Tape::dropout`] calls are active, driven by `rng`.
    pub fn with_dropout(rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::default()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_shaped(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Var {
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers trainable parameter `id`; repeated calls return the same var.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Makes an existing var stand in for parameter `id`.
    pub fn bind_param(&mut self, id: usize, v: Var) {
        self.params.insert(id, v);
    }

    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_shaped(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.dims2(a, "matmul_tn")?;
        let (k2, n) = self.dims2(b, "matmul_tn")?;
        if k != k2 {
            return Err(Error::dim("matmul_tn", self.shape(a), self.shape(b)));
        }
        let out = matmul_tn_kernel(self.data(a), self.data(b), k, m, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_shaped(vec![m, n], out, Op::MatMulTN(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push_shaped(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(z) = self.data(b).iter().find(|v| **v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("division by {z}"),
            });
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `x[n×h] + bias[h]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, h) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [h] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for r in 0..n {
            out[r * h..(r + 1) * h].iter_mut().zip(&b).for_each(|(o, bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push_shaped(vec![n, h], out, Op::AddRow(x, bias), rg))
    }

    fn scalar_of(&self, s: Var, op: &'static str) -> Result<f64> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::dim(op, self.shape(s), &[1]));
        }
        Ok(self.data(s)[0])
    }

    /// Adds a one-element var to every entry of `x`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "add_scalar_var")?;
        let out = self.data(x).iter().map(|v| v + sv).collect();
        let rg = self.rg(x) || self.rg(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push_shaped(shape, out, Op::AddScalarVar(x, s), rg))
    }

    /// Multiplies every entry of `x` by a one-element var.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "mul_scalar_var")?;
        let out = self.data(x).iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push_shaped(shape, out, Op::MulScalarVar(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push_shaped(shape, out, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v + c).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push_shaped(shape, out, Op::AddConst(x), rg)
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.nodes[x.0].value.numel() {
            return Err(Error::dim("mul_const", self.shape(x), &[c.len()]));
        }
        let out = self.data(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push_shaped(shape, out, Op::MulConst(x, c), rg))
    }

    /// Scales row `i` of a matrix by constant `w[i]`.
    pub fn mul_rows_const(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        let (n, h) = self.dims2(x, "mul_rows_const")?;
        if w.len() != n {
            return Err(Error::dim("mul_rows_const", self.shape(x), &[w.len()]));
        }
        let mut out = self.data(x).to_vec();
        for (r, wr) in w.iter().enumerate() {
            out[r * h..(r + 1) * h].iter_mut().for_each(|v| *v *= wr);
        }
        let rg = self.rg(x);
        Ok(self.push_shaped(vec![n, h], out, Op::MulRowsConst(x, w), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push_shaped(shape, out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push_shaped(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push_shaped(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push_shaped(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// Softmax of a matrix along `axis` (`Cols` normalizes each row across
    /// its columns, `Rows` normalizes each column down its rows). A 1-D input
    /// is one row. Positions where `mask` is false get weight 0; `mask` runs
    /// along the normalized axis.
    pub fn softmax(&mut self, x: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, h) = match shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            other => return Err(Error::dim("softmax", other, &[0, 0])),
        };
        let along = if axis == Axis::Cols { h } else { n };
        if let Some(m) = mask {
            if m.len() != along {
                return Err(Error::dim("softmax", &shape, &[m.len()]));
            }
        }
        let mut out = self.data(x).to_vec();
        match axis {
            Axis::Cols => {
                for r in 0..n {
                    softmax_in_place(&mut out[r * h..(r + 1) * h], mask);
                }
            }
            Axis::Rows => {
                let mut col = vec![0.0; n];
                for c in 0..h {
                    for r in 0..n {
                        col[r] = out[r * h + c];
                    }
                    softmax_in_place(&mut col, mask);
                    for r in 0..n {
                        out[r * h + c] = col[r];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push_shaped(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax of `scale · q kᵀ` with masked key positions. Only the
    /// `n×m` probability matrix is stored.
    pub fn scaled_dot_softmax(&mut self, q: Var, k: Var, scale: f64, key_mask: Option<&[bool]>) -> Result<Var> {
        let (n, d) = self.dims2(q, "scaled_dot_softmax")?;
        let (m, d2) = self.dims2(k, "scaled_dot_softmax")?;
        if d != d2 {
            return Err(Error::dim("scaled_dot_softmax", self.shape(q), self.shape(k)));
        }
        if let Some(mask) = key_mask {
            if mask.len() != m {
                return Err(Error::dim("scaled_dot_softmax", self.shape(k), &[mask.len()]));
            }
        }
        let mut values = matmul_nt_kernel(self.data(q), self.data(k), n, d, m);
        for r in 0..n {
            let row = &mut values[r * m..(r + 1) * m];
            row.iter_mut().for_each(|v| *v *= scale);
            softmax_in_place(row, key_mask);
        }
        // Registered once, after normalization: a single n×m buffer.
        let probs = Tensor::from_parts(vec![n, m], values);
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(probs, Op::ScaledDotSoftmax { q, k, scale }, rg))
    }

    /// Pairwise cosine similarity between rows of `a: p×h` and `b: q×h`.
    /// A zero row has similarity 0 with everything.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, h) = self.dims2(a, "cosine_rows")?;
        let (q, h2) = self.dims2(b, "cosine_rows")?;
        if h != h2 {
            return Err(Error::dim("cosine_rows", self.shape(a), self.shape(b)));
        }
        let out = cosine_kernel(self.data(a), self.data(b), p, q, h);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_shaped(vec![p, q], out, Op::CosineRows(a, b), rg))
    }

    /// Same-length grouped 1-D convolution over the rows of `x: n×h`.
    ///
    /// `w` has shape `h × (h/groups) × window`; output channel `o` reads the
    /// input channels of its group. Zero padding of `(window-1)/2` per side.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, window: usize, groups: usize) -> Result<Var> {
        let (n, h) = self.dims2(x, "conv1d")?;
        if groups == 0 || h % groups != 0 {
            return Err(Error::Config(format!(
                "{h} channels not divisible into {groups} groups"
            )));
        }
        if window.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution window {window} is not odd")));
        }
        let cg = h / groups;
        if self.shape(w) != [h, cg, window] {
            return Err(Error::dim("conv1d", &[h, cg, window], self.shape(w)));
        }
        if self.shape(b) != [h] {
            return Err(Error::dim("conv1d", &[h], self.shape(b)));
        }
        let out = conv1d_kernel(self.data(x), self.data(w), self.data(b), n, h, cg, window);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push_shaped(
            vec![n, h],
            out,
            Op::Conv1d {
                x,
                w,
                b,
                window,
                groups,
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, h) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut normalized = vec![0.0; n * h];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * h];
        for r in 0..n {
            let row = &xd[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..h {
                let z = (row[c] - mean) * is;
                normalized[r * h + c] = z;
                out[r * h + c] = g[c] * z + bt[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push_shaped(
            vec![n, h],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup `table[ids]`; id 0 is padding and yields a zero row.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        let t = self.data(table);
        let mut out = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Contract(format!(
                    "token id {id} out of bounds for table of {v} rows"
                )));
            }
            if id != 0 {
                out[r * d..(r + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let rg = self.rg(table);
        Ok(self.push_shaped(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, h) = self.dims2(x, "slice_cols")?;
        if start + len > h {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xd[r * h + start..r * h + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push_shaped(vec![n, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (n, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pw) = self.dims2(p, "concat_cols")?;
            if pn != n {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push_shaped(vec![n, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, h) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pn, ph) = self.dims2(p, "concat_rows")?;
            if ph != h {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pn;
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push_shaped(vec![rows, h], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gaussian kernel pooling of the columns `start..end` of `x: q×n`:
    /// `out[i,k] = ln(Σⱼ exp(-(x[i,j]-μₖ)²/2σₖ²) + 1e-10)` over unmasked `j`.
    pub fn kernel_pool(
        &mut self,
        x: Var,
        start: usize,
        end: usize,
        mask: &[bool],
        mus: &[f64],
        sigmas: &[f64],
    ) -> Result<Var> {
        let (q, n) = self.dims2(x, "kernel_pool")?;
        if mask.len() != n || end > n || start > end || mus.len() != sigmas.len() {
            return Err(Error::dim("kernel_pool", self.shape(x), &[mask.len(), start, end]));
        }
        let k = mus.len();
        let xd = self.data(x);
        let mut out = vec![0.0; q * k];
        for i in 0..q {
            let row = &xd[i * n..(i + 1) * n];
            for (kk, (mu, sigma)) in mus.iter().zip(sigmas).enumerate() {
                let denom = 2.0 * sigma * sigma;
                let mut s = 0.0;
                for j in start..end {
                    if mask[j] {
                        s += (-(row[j] - mu).powi(2) / denom).exp();
                    }
                }
                out[i * k + kk] = (s + KERNEL_LOG_FLOOR).ln();
            }
        }
        let rg = self.rg(x);
        Ok(self.push_shaped(
            vec![q, k],
            out,
            Op::KernelPool {
                x,
                start,
                end,
                mask: mask.to_vec(),
                mus: mus.to_vec(),
                sigmas: sigmas.to_vec(),
            },
            rg,
        ))
    }

    /// Batch normalization of a vector. With `stats = None` the batch's own
    /// mean and population variance are used (and differentiated through);
    /// otherwise the given `(mean, variance)` are treated as constants.
    pub fn batch_norm(&mut self, x: Var, stats: Option<(f64, f64)>) -> Result<Var> {
        let xd = self.data(x);
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m, v, false),
            None => {
                if xd.len() < 2 {
                    return Err(Error::Contract(
                        "batch normalization in training needs at least 2 values".into(),
                    ));
                }
                let m = xd.iter().sum::<f64>() / xd.len() as f64;
                let v = xd.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xd.len() as f64;
                (m, v, true)
            }
        };
        let inv_std = 1.0 / var.max(BN_VAR_FLOOR).sqrt();
        let grad = match (batch_stats, var < BN_VAR_FLOOR) {
            (false, _) => BnGrad::Fixed,
            (true, false) => BnGrad::Batch,
            (true, true) => BnGrad::MeanOnly,
        };
        let out = xd.iter().map(|v| (v - mean) * inv_std).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push_shaped(shape, out, Op::BatchNorm { x, inv_std, grad }, rg))
    }

    /// Sums consecutive runs of a vector: `lens = [2, 3]` yields
    /// `[x0+x1, x2+x3+x4]`, accumulated left to right.
    pub fn segment_sum(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let xd = self.data(x);
        if lens.iter().sum::<usize>() != xd.len() {
            return Err(Error::dim("segment_sum", self.shape(x), lens));
        }
        let mut out = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in lens {
            let mut s = 0.0;
            for v in &xd[off..off + l] {
                s += v;
            }
            out.push(s);
            off += l;
        }
        let rg = self.rg(x);
        Ok(self.push_shaped(vec![lens.len()], out, Op::SegmentSum { x, lens: lens.to_vec() }, rg))
    }

    /// Picks entries of a flattened `x` by index.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xd = self.data(x);
        if let Some(bad) = idx.iter().find(|i| **i >= xd.len()) {
            return Err(Error::dim("select", self.shape(x), &[*bad]));
        }
        let out = idx.iter().map(|i| xd[*i]).collect();
        let rg = self.rg(x);
        Ok(self.push_shaped(vec![idx.len()], out, Op::Select { x, idx: idx.to_vec() }, rg))
    }

    /// Inverted dropout; identity on a tape without dropout.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.numel();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(x, mask)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n_loss = self.nodes[loss.0].value.numel();
        if n_loss != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut send = |v: Var, g: Vec<f64>| {
            if self.rg(v) {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                if self.rg(*a) {
                    send(*a, matmul_nt_kernel(gy, self.data(*b), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, matmul_tn_kernel(self.data(*a), gy, m, k, n));
                }
            }
            Op::MatMulTN(a, b) => {
                let (k, m) = self.nodes[a.0].value.dims2().unwrap();
                let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                if self.rg(*a) {
                    send(*a, matmul_nt_kernel(self.data(*b), gy, k, n, m));
                }
                if self.rg(*b) {
                    send(*b, matmul_kernel(self.data(*a), gy, k, m, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, gy.to_vec());
                send(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gy.to_vec());
                send(*b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, gy.iter().zip(bd).map(|(g, v)| g * v).collect());
                send(*b, gy.iter().zip(ad).map(|(g, v)| g * v).collect());
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                send(*a, gy.iter().zip(bd).map(|(g, v)| g / v).collect());
                send(*b, gy.iter().zip(y).zip(bd).map(|((g, q), v)| -g * q / v).collect());
            }
            Op::AddRow(x, bias) => {
                send(*x, gy.to_vec());
                let h = self.data(*bias).len();
                let mut gb = vec![0.0; h];
                for row in gy.chunks(h) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                send(*bias, gb);
            }
            Op::AddScalarVar(x, s) => {
                send(*x, gy.to_vec());
                send(*s, vec![gy.iter().sum()]);
            }
            Op::MulScalarVar(x, s) => {
                let sv = self.data(*s)[0];
                send(*x, gy.iter().map(|g| g * sv).collect());
                let xd = self.data(*x);
                send(*s, vec![gy.iter().zip(xd).map(|(g, v)| g * v).sum()]);
            }
            Op::Scale(x, c) => send(*x, gy.iter().map(|g| g * c).collect()),
            Op::AddConst(x) | Op::Reshape(x) => send(*x, gy.to_vec()),
            Op::MulConst(x, c) => send(*x, gy.iter().zip(c).map(|(g, v)| g * v).collect()),
            Op::MulRowsConst(x, w) => {
                let h = gy.len() / w.len().max(1);
                let mut g = gy.to_vec();
                for (r, wr) in w.iter().enumerate() {
                    g[r * h..(r + 1) * h].iter_mut().for_each(|v| *v *= wr);
                }
                send(*x, g);
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                send(
                    *x,
                    gy.iter()
                        .zip(xd)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(x) => send(*x, gy.iter().zip(y).map(|(g, v)| g * v).collect()),
            Op::Log(x) => {
                let xd = self.data(*x);
                send(*x, gy.iter().zip(xd).map(|(g, v)| g / v).collect());
            }
            Op::Softplus(x) => {
                let xd = self.data(*x);
                send(*x, gy.iter().zip(xd).map(|(g, v)| g * sigmoid(*v)).collect());
            }
            Op::Sum(x) => {
                let n = self.data(*x).len();
                send(*x, vec![gy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.data(*x).len();
                send(*x, vec![gy[0] / n as f64; n]);
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (n, h) = match shape {
                    [c] => (1, *c),
                    [r, c] => (*r, *c),
                    _ => unreachable!(),
                };
                let mut g = vec![0.0; n * h];
                match axis {
                    Axis::Cols => {
                        for r in 0..n {
                            let s = (0..h).map(|c| gy[r * h + c] * y[r * h + c]).sum::<f64>();
                            for c in 0..h {
                                g[r * h + c] = y[r * h + c] * (gy[r * h + c] - s);
                            }
                        }
                    }
                    Axis::Rows => {
                        for c in 0..h {
                            let s = (0..n).map(|r| gy[r * h + c] * y[r * h + c]).sum::<f64>();
                            for r in 0..n {
                                g[r * h + c] = y[r * h + c] * (gy[r * h + c] - s);
                            }
                        }
                    }
                }
                send(*x, g);
            }
            Op::ScaledDotSoftmax { q, k, scale } => {
                let (n, m) = node.value.dims2().unwrap();
                let (_, d) = self.nodes[q.0].value.dims2().unwrap();
                let mut gl = vec![0.0; n * m];
                for r in 0..n {
                    let row = r * m..(r + 1) * m;
                    let s: f64 = gy[row.clone()].iter().zip(&y[row]).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        gl[r * m + c] = scale * y[r * m + c] * (gy[r * m + c] - s);
                    }
                }
                if self.rg(*q) {
                    send(*q, matmul_kernel(&gl, self.data(*k), n, m, d));
                }
                if self.rg(*k) {
                    send(*k, matmul_tn_kernel(&gl, self.data(*q), n, m, d));
                }
            }
            Op::CosineRows(a, b) => {
                let (p, h) = self.nodes[a.0].value.dims2().unwrap();
                let (q, _) = self.nodes[b.0].value.dims2().unwrap();
                let (ga, gb) = cosine_backward(self.data(*a), self.data(*b), y, gy, p, q, h);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Conv1d {
                x,
                w,
                b,
                window,
                groups,
            } => {
                let (n, h) = self.nodes[x.0].value.dims2().unwrap();
                let cg = h / groups;
                let (gx, gw, gb) = conv1d_backward(self.data(*x), self.data(*w), gy, n, h, cg, *window);
                send(*x, gx);
                send(*w, gw);
                send(*b, gb);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (n, h) = node.value.dims2().unwrap();
                let g = self.data(*gamma);
                let mut gx = vec![0.0; n * h];
                let mut gg = vec![0.0; h];
                let mut gbeta = vec![0.0; h];
                for r in 0..n {
                    let mut mean_dz = 0.0;
                    let mut mean_dz_z = 0.0;
                    for c in 0..h {
                        let i = r * h + c;
                        let dz = gy[i] * g[c];
                        mean_dz += dz;
                        mean_dz_z += dz * normalized[i];
                        gg[c] += gy[i] * normalized[i];
                        gbeta[c] += gy[i];
                    }
                    mean_dz /= h as f64;
                    mean_dz_z /= h as f64;
                    for c in 0..h {
                        let i = r * h + c;
                        let dz = gy[i] * g[c];
                        gx[i] = inv_std[r] * (dz - mean_dz - normalized[i] * mean_dz_z);
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gbeta);
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let (v, d) = self.nodes[table.0].value.dims2().unwrap();
                    let mut gt = vec![0.0; v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        if id == 0 {
                            continue;
                        }
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&gy[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    send(*table, gt);
                }
            }
            Op::SliceCols { x, start } => {
                let (n, h) = self.nodes[x.0].value.dims2().unwrap();
                let len = gy.len() / n.max(1);
                let mut g = vec![0.0; n * h];
                for r in 0..n {
                    g[r * h + start..r * h + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
                }
                send(*x, g);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for p in parts {
                    let (_, w) = self.nodes[p.0].value.dims2().unwrap();
                    if self.rg(*p) {
                        let mut g = Vec::with_capacity(n * w);
                        for r in 0..n {
                            g.extend_from_slice(&gy[r * total + off..r * total + off + w]);
                        }
                        send(*p, g);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    send(*p, gy[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::KernelPool {
                x,
                start,
                end,
                mask,
                mus,
                sigmas,
            } => {
                let (q, n) = self.nodes[x.0].value.dims2().unwrap();
                let k = mus.len();
                let xd = self.data(*x);
                let mut g = vec![0.0; q * n];
                for i in 0..q {
                    for (kk, (mu, sigma)) in mus.iter().zip(sigmas).enumerate() {
                        let gk = gy[i * k + kk];
                        if gk == 0.0 {
                            continue;
                        }
                        // y = ln(S + floor)  =>  dS = gk / (S + floor)
                        let total = y[i * k + kk].exp();
                        let s2 = sigma * sigma;
                        for j in *start..*end {
                            if !mask[j] {
                                continue;
                            }
                            let dx = xd[i * n + j] - mu;
                            let e = (-dx * dx / (2.0 * s2)).exp();
                            g[i * n + j] += gk / total * e * (-dx / s2);
                        }
                    }
                }
                send(*x, g);
            }
            Op::BatchNorm { x, inv_std, grad } => match grad {
                BnGrad::Fixed => send(*x, gy.iter().map(|g| g * inv_std).collect()),
                BnGrad::MeanOnly => {
                    let m = gy.iter().sum::<f64>() / gy.len() as f64;
                    send(*x, gy.iter().map(|g| (g - m) * inv_std).collect());
                }
                BnGrad::Batch => {
                    let n = gy.len() as f64;
                    let mg = gy.iter().sum::<f64>() / n;
                    let mgy = gy.iter().zip(y).map(|(g, v)| g * v).sum::<f64>() / n;
                    send(
                        *x,
                        gy.iter().zip(y).map(|(g, v)| inv_std * (g - mg - v * mgy)).collect(),
                    );
                }
            },
            Op::SegmentSum { x, lens } => {
                let mut g = Vec::with_capacity(lens.iter().sum());
                for (gs, &l) in gy.iter().zip(lens) {
                    g.extend(std::iter::repeat_n(*gs, l));
                }
                send(*x, g);
            }
            Op::Select { x, idx } => {
                let mut g = vec![0.0; self.data(*x).len()];
                for (gs, &i) in gy.iter().zip(idx) {
                    g[i] += gs;
                }
                send(*x, g);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn cosine_kernel(a: &[f64], b: &[f64], p: usize, q: usize, h: usize) -> Vec<f64> {
    let na = row_norms(a, p, h);
    let nb = row_norms(b, q, h);
    let mut out = matmul_nt_kernel(a, b, p, h, q);
    for i in 0..p {
        for j in 0..q {
            let d = na[i] * nb[j];
            let v = &mut out[i * q + j];
            *v = if d == 0.0 { 0.0 } else { (*v / d).clamp(-1.0, 1.0) };
        }
    }
    out
}

fn cosine_backward(a: &[f64], b: &[f64], c: &[f64], gy: &[f64], p: usize, q: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let na = row_norms(a, p, h);
    let nb = row_norms(b, q, h);
    let mut ga = vec![0.0; p * h];
    let mut gb = vec![0.0; q * h];
    for i in 0..p {
        if na[i] == 0.0 {
            continue;
        }
        for j in 0..q {
            if nb[j] == 0.0 {
                continue;
            }
            let g = gy[i * q + j];
            if g == 0.0 {
                continue;
            }
            let cij = c[i * q + j];
            let inv = 1.0 / (na[i] * nb[j]);
            let ca = cij / (na[i] * na[i]);
            let cb = cij / (nb[j] * nb[j]);
            for t in 0..h {
                let (av, bv) = (a[i * h + t], b[j * h + t]);
                ga[i * h + t] += g * (bv * inv - ca * av);
                gb[j * h + t] += g * (av * inv - cb * bv);
            }
        }
    }
    (ga, gb)
}

pub(crate) fn conv1d_kernel(x: &[f64], w: &[f64], b: &[f64], n: usize, h: usize, cg: usize, window: usize) -> Vec<f64> {
    let pad = (window - 1) / 2;
    let mut out = vec![0.0; n * h];
    for o in 0..h {
        let base = (o / cg) * cg;
        for t in 0..n {
            let mut s = b[o];
            for j in 0..window {
                let src = t + j;
                if src < pad || src - pad >= n {
                    continue;
                }
                let xrow = &x[(src - pad) * h + base..(src - pad) * h + base + cg];
                for (c, xv) in xrow.iter().enumerate() {
                    s += w[(o * cg + c) * window + j] * xv;
                }
            }
            out[t * h + o] = s;
        }
    }
    out
}

fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    n: usize,
    h: usize,
    cg: usize,
    window: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pad = (window - 1) / 2;
    let mut gx = vec![0.0; n * h];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; h];
    for o in 0..h {
        let base = (o / cg) * cg;
        for t in 0..n {
            let g = gy[t * h + o];
            gb[o] += g;
            if g == 0.0 {
                continue;
            }
            for j in 0..window {
                let src = t + j;
                if src < pad || src - pad >= n {
                    continue;
                }
                let r = src - pad;
                for c in 0..cg {
                    let wi = (o * cg + c) * window + j;
                    gw[wi] += g * x[r * h + base + c];
                    gx[r * h + base + c] += g * w[wi];
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
