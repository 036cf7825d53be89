use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Exact form `x * Phi(x)` using `erf`, not the tanh approximation.
    Gelu,
    Sigmoid,
    Tanh,
}

enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale { x: usize, factor: T },
    OneMinus(usize),
    Act { x: usize, kind: Activation },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(usize),
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Record of executed differentiable operations.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction and [`Tape::backward`] is a single reverse sweep.
/// One tape serves one forward/backward pass; call [`Tape::reset`] (or drop
/// it) before recording the next one. Leaves may borrow parameter storage for
/// `'a` instead of copying it.
///
/// Accessors taking a [`Var`] panic when handed a handle from another tape;
/// operations return [`Error::Graph`] instead.
pub struct Tape<'a, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every record. Handles issued before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn expect_index(&self, v: Var) -> usize {
        self.index(v).unwrap_or_else(|e| panic!("{e}"))
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_owned(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push(shape, Cow::Owned(value), op, requires_grad)
    }

    /// Records an owned leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, requires_grad)
    }

    /// Records a leaf that borrows its storage.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[self.expect_index(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.expect_index(v)].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.expect_index(v)].requires_grad
    }

    /// Gradient of the last backward pass, `None` for values that do not
    /// require one or were unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[self.expect_index(v)].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[self.expect_index(v)];
        Tensor::new(&node.shape, node.value.to_vec()).expect("recorded shapes are valid")
    }

    fn matrix(&self, i: usize, what: &str) -> Result<(usize, usize)> {
        match self.nodes[i].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn last_dim(&self, i: usize) -> (usize, usize) {
        let node = &self.nodes[i];
        let d = *node.shape.last().expect("recorded shapes are non-empty");
        (node.value.len() / d, d)
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(())
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m×k] · bᵀ` with `b [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (m, k) = self.matrix(ai, "matmul lhs")?;
        let (br, bc) = self.matrix(bi, "matmul rhs")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul: inner dimensions differ between {:?} and {:?}{}",
                self.nodes[ai].shape,
                self.nodes[bi].shape,
                if trans_b { " (rhs transposed)" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.nodes[ai].value,
            k,
            1,
            &self.nodes[bi].value,
            rsb,
            csb,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let rg = self.rg(&[ai, bi]);
        Ok(self.push_owned(vec![m, n], out, Op::Matmul { a: ai, b: bi, trans_b }, rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Vec<T>)> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        self.same_shape(ai, bi, what)?;
        let out = self.nodes[ai]
            .value
            .iter()
            .zip(self.nodes[bi].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((ai, bi, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push_owned(self.nodes[ai].shape.clone(), out, Op::Add(ai, bi), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push_owned(self.nodes[ai].shape.clone(), out, Op::Sub(ai, bi), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push_owned(self.nodes[ai].shape.clone(), out, Op::Mul(ai, bi), rg))
    }

    /// Adds `bias` (any shape holding exactly `d` values) to every slice of
    /// `x` along its last axis of width `d`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.index(x)?, self.index(bias)?);
        let (_, d) = self.last_dim(xi);
        if self.nodes[bi].value.len() != d {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.nodes[bi].shape, self.nodes[xi].shape
            )));
        }
        let b = &self.nodes[bi].value;
        let out = self.nodes[xi]
            .value
            .chunks(d)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(&v, &c)| v + c))
            .collect();
        let rg = self.rg(&[xi, bi]);
        Ok(self.push_owned(self.nodes[xi].shape.clone(), out, Op::AddBias { x: xi, bias: bi }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.index(x)?;
        let f = T::of(factor);
        let out = self.nodes[xi].value.iter().map(|&v| v * f).collect();
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(self.nodes[xi].shape.clone(), out, Op::Scale { x: xi, factor: f }, rg))
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.iter().map(|&v| T::one() - v).collect();
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(self.nodes[xi].shape.clone(), out, Op::OneMinus(xi), rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi]
            .value
            .iter()
            .map(|&v| T::of(kind.apply(v.f64())))
            .collect();
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(self.nodes[xi].shape.clone(), out, Op::Act { x: xi, kind }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let (_, d) = self.last_dim(xi);
        let mut out = self.nodes[xi].value.to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(self.nodes[xi].shape.clone(), out, Op::Softmax(xi), rg))
    }

    /// Normalizes every last-axis slice to zero mean and unit variance, then
    /// applies `gamma` and `beta` (each holding `d` values).
    ///
    /// A slice whose variance plus `eps` is exactly zero normalizes to zero.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Numeric(format!("layer_norm: eps must be non-negative, got {eps}")));
        }
        let (rows, d) = self.last_dim(xi);
        for (i, what) in [(gi, "gamma"), (bi, "beta")] {
            if self.nodes[i].value.len() != d {
                return Err(Error::shape(format!(
                    "layer_norm: {what} {:?} does not match last axis of {:?}",
                    self.nodes[i].shape, self.nodes[xi].shape
                )));
            }
        }
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let mut out = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        {
            let (xv, gv, bv) = (&self.nodes[xi].value, &self.nodes[gi].value, &self.nodes[bi].value);
            for row in xv.chunks(d) {
                let mean = row.iter().copied().sum::<T>() / dt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
                let denom = var + eps;
                let rstd = if denom > T::zero() { T::one() / denom.sqrt() } else { T::zero() };
                out.extend(
                    row.iter()
                        .zip(gv.iter().zip(bv.iter()))
                        .map(|(&v, (&g, &b))| (v - mean) * rstd * g + b),
                );
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let rg = self.rg(&[xi, gi, bi]);
        Ok(self.push_owned(
            self.nodes[xi].shape.clone(),
            out,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let (r, c) = self.matrix(xi, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape(format!(
                "slice_rows: rows {start}..{} out of range for {:?}",
                start + len,
                self.nodes[xi].shape
            )));
        }
        let out = self.nodes[xi].value[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(vec![len, c], out, Op::SliceRows { x: xi, start }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let (r, c) = self.matrix(xi, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_cols: columns {start}..{} out of range for {:?}",
                start + len,
                self.nodes[xi].shape
            )));
        }
        let v = &self.nodes[xi].value;
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&v[row * c + start..row * c + start + len]);
        }
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(vec![r, len], out, Op::SliceCols { x: xi, start }, rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or_else(|| Error::shape("concat_rows: no inputs"))?;
        let (_, c) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        for &i in &idx {
            let (r, ci) = self.matrix(i, "concat_rows")?;
            if ci != c {
                return Err(Error::shape(format!(
                    "concat_rows: column counts {:?} and {:?} differ",
                    self.nodes[first].shape, self.nodes[i].shape
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &i in &idx {
            out.extend_from_slice(&self.nodes[i].value);
        }
        let rg = self.rg(&idx);
        Ok(self.push_owned(vec![rows, c], out, Op::ConcatRows(idx), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or_else(|| Error::shape("concat_cols: no inputs"))?;
        let (r, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (ri, c) = self.matrix(i, "concat_cols")?;
            if ri != r {
                return Err(Error::shape(format!(
                    "concat_cols: row counts {:?} and {:?} differ",
                    self.nodes[first].shape, self.nodes[i].shape
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&i, &c) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value[row * c..(row + 1) * c]);
            }
        }
        let rg = self.rg(&idx);
        Ok(self.push_owned(vec![r, total], out, Op::ConcatCols(idx), rg))
    }

    /// Column means of a matrix, as a `[1 × cols]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let (r, c) = self.matrix(xi, "mean_rows")?;
        let mut out = vec![T::zero(); c];
        for row in self.nodes[xi].value.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let rt = T::of(r as f64);
        out.iter_mut().for_each(|o| *o = *o / rt);
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(vec![1, c], out, Op::MeanRows(xi), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let s = self.nodes[xi].value.iter().copied().sum::<T>();
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(vec![1], vec![s], Op::Sum(xi), rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.index(logits)?;
        let (b, c) = self.matrix(li, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::data(format!(
                "cross_entropy: label {label} in row {row} is outside 0..{c}"
            )));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (row, &label) in self.nodes[li].value.chunks(c).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total = total + (lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of(b as f64);
        let rg = self.rg(&[li]);
        Ok(self.push_owned(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[xi].value.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.nodes[xi].shape
            )));
        }
        let out = self.nodes[xi].value.to_vec();
        let rg = self.rg(&[xi]);
        Ok(self.push_owned(shape.to_vec(), out, Op::Reshape(xi), rg))
    }

    /// Reverse sweep from a scalar loss. Populates the gradient of every
    /// reachable value that requires one; values that do not require a
    /// gradient (frozen parameters, inputs) are skipped entirely.
    ///
    /// A tape supports one backward pass; reset it before recording again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this tape; reset it first".into()));
        }
        self.backward_done = true;
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        self.nodes[li].grad = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            if let Some(g) = node.grad.as_deref() {
                backprop(node, g, before);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// Gradient buffer of `nodes[j]`, allocated on first use; `None` when the
/// node does not take gradients.
fn grad_mut<'n, T: Scalar>(nodes: &'n mut [Node<'_, T>], j: usize) -> Option<&'n mut Vec<T>> {
    let node = &mut nodes[j];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(nodes: &mut [Node<'_, T>], j: usize, contrib: impl IntoIterator<Item = T>) {
    if let Some(g) = grad_mut(nodes, j) {
        for (acc, c) in g.iter_mut().zip(contrib) {
            *acc = *acc + c;
        }
    }
}

fn needs<T: Scalar>(nodes: &[Node<'_, T>], j: usize) -> bool {
    nodes[j].requires_grad
}

fn backprop<T: Scalar>(node: &Node<'_, T>, g: &[T], nodes: &mut [Node<'_, T>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::Matmul { a, b, trans_b } => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = node.shape[1];
            if needs(nodes, a) {
                // dA = G·Bᵀ, or G·B when the forward used Bᵀ
                let mut da = vec![T::zero(); m * k];
                let (rsb, csb) = if trans_b { (k, 1) } else { (1, n) };
                T::gemm(m, n, k, T::one(), g, n, 1, &nodes[b].value, rsb, csb, T::zero(), &mut da, k, 1);
                add_into(nodes, a, da);
            }
            if needs(nodes, b) {
                let db = if trans_b {
                    // dB = Gᵀ·A, shape n×k
                    let mut db = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), g, 1, n, &nodes[a].value, k, 1, T::zero(), &mut db, k, 1);
                    db
                } else {
                    // dB = Aᵀ·G, shape k×n
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), &nodes[a].value, 1, k, g, n, 1, T::zero(), &mut db, n, 1);
                    db
                };
                add_into(nodes, b, db);
            }
        }
        &Op::Add(a, b) => {
            add_into(nodes, a, g.iter().copied());
            add_into(nodes, b, g.iter().copied());
        }
        &Op::Sub(a, b) => {
            add_into(nodes, a, g.iter().copied());
            add_into(nodes, b, g.iter().map(|&v| -v));
        }
        &Op::Mul(a, b) => {
            if needs(nodes, a) {
                let da: Vec<T> = g.iter().zip(nodes[b].value.iter()).map(|(&gv, &y)| gv * y).collect();
                add_into(nodes, a, da);
            }
            if needs(nodes, b) {
                let db: Vec<T> = g.iter().zip(nodes[a].value.iter()).map(|(&gv, &x)| gv * x).collect();
                add_into(nodes, b, db);
            }
        }
        &Op::AddBias { x, bias } => {
            add_into(nodes, x, g.iter().copied());
            if let Some(gb) = grad_mut(nodes, bias) {
                let d = gb.len();
                for row in g.chunks(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
            }
        }
        &Op::Scale { x, factor } => add_into(nodes, x, g.iter().map(|&v| v * factor)),
        &Op::OneMinus(x) => add_into(nodes, x, g.iter().map(|&v| -v)),
        &Op::Act { x, kind } => {
            if !needs(nodes, x) {
                return;
            }
            let dx: Vec<T> = match kind {
                Activation::Sigmoid => g
                    .iter()
                    .zip(node.value.iter())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect(),
                Activation::Tanh => g
                    .iter()
                    .zip(node.value.iter())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect(),
                Activation::Gelu => g
                    .iter()
                    .zip(nodes[x].value.iter())
                    .map(|(&gv, &xv)| gv * T::of(gelu_grad(xv.f64())))
                    .collect(),
            };
            add_into(nodes, x, dx);
        }
        &Op::Softmax(x) => {
            let d = *node.shape.last().unwrap();
            if let Some(gx) = grad_mut(nodes, x) {
                for ((gx_row, g_row), y_row) in gx.chunks_mut(d).zip(g.chunks(d)).zip(node.value.chunks(d)) {
                    let dot = g_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum::<T>();
                    for ((acc, &gv), &y) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                        *acc = *acc + y * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let d = *node.shape.last().unwrap();
            let dt = T::of(d as f64);
            let xv = &nodes[x].value;
            let gv = &nodes[gamma].value;
            let xhat: Vec<T> = xv
                .chunks(d)
                .zip(mean.iter().zip(rstd.iter()))
                .flat_map(|(row, (&m, &r))| row.iter().map(move |&v| (v - m) * r))
                .collect();
            let dx = needs(nodes, x).then(|| {
                let mut dx = Vec::with_capacity(xv.len());
                for ((g_row, xh_row), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd.iter()) {
                    let dxhat: Vec<T> = g_row.iter().zip(gv.iter()).map(|(&a, &b)| a * b).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / dt;
                    let mean_dx = dxhat.iter().zip(xh_row).map(|(&a, &b)| a * b).sum::<T>() / dt;
                    dx.extend(
                        dxhat
                            .iter()
                            .zip(xh_row)
                            .map(|(&dh, &xh)| r * (dh - mean_d - xh * mean_dx)),
                    );
                }
                dx
            });
            if let Some(dx) = dx {
                add_into(nodes, x, dx);
            }
            if let Some(gg) = grad_mut(nodes, gamma) {
                for (g_row, xh_row) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((acc, &gv), &xh) in gg.iter_mut().zip(g_row).zip(xh_row) {
                        *acc = *acc + gv * xh;
                    }
                }
            }
            if let Some(gb) = grad_mut(nodes, beta) {
                for g_row in g.chunks(d) {
                    for (acc, &gv) in gb.iter_mut().zip(g_row) {
                        *acc = *acc + gv;
                    }
                }
            }
        }
        &Op::SliceRows { x, start } => {
            let c = node.shape[1];
            if let Some(gx) = grad_mut(nodes, x) {
                for (acc, &v) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *acc = *acc + v;
                }
            }
        }
        &Op::SliceCols { x, start } => {
            let len = node.shape[1];
            let c = nodes[x].shape[1];
            if let Some(gx) = grad_mut(nodes, x) {
                for (row, g_row) in g.chunks(len).enumerate() {
                    let base = row * c + start;
                    for (acc, &v) in gx[base..base + len].iter_mut().zip(g_row) {
                        *acc = *acc + v;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                add_into(nodes, p, g[offset..offset + len].iter().copied());
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.shape[1];
            let mut col = 0;
            for &p in parts {
                let c = nodes[p].shape[1];
                if let Some(gp) = grad_mut(nodes, p) {
                    for (gp_row, g_row) in gp.chunks_mut(c).zip(g.chunks(total)) {
                        for (acc, &v) in gp_row.iter_mut().zip(&g_row[col..col + c]) {
                            *acc = *acc + v;
                        }
                    }
                }
                col += c;
            }
        }
        &Op::MeanRows(x) => {
            let r = nodes[x].shape[0];
            let rt = T::of(r as f64);
            if let Some(gx) = grad_mut(nodes, x) {
                for gx_row in gx.chunks_mut(g.len()) {
                    for (acc, &v) in gx_row.iter_mut().zip(g) {
                        *acc = *acc + v / rt;
                    }
                }
            }
        }
        &Op::Sum(x) => {
            let s = g[0];
            if let Some(gx) = grad_mut(nodes, x) {
                gx.iter_mut().for_each(|acc| *acc = *acc + s);
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = nodes[*logits].shape[1];
            let scale = g[0] / T::of(labels.len() as f64);
            if let Some(gl) = grad_mut(nodes, *logits) {
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let p = probs[row * c + j];
                        let t = if j == label { T::one() } else { T::zero() };
                        gl[row * c + j] = gl[row * c + j] + scale * (p - t);
                    }
                }
            }
        }
        &Op::Reshape(x) => add_into(nodes, x, g.iter().copied()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let id = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = tape.matmul(id, b).unwrap();
        assert_eq!(tape.value(c), &[1., 2., 3., 4.]);

        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = tape.matmul(a, b).unwrap();
        // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
        assert_eq!(tape.value(c), &[19., 22., 43., 50.]);

        let z = tape.leaf(Tensor::zeros(&[3, 4]));
        let b = tape.leaf(t(&[4, 2], &[1., -2., 3., 4., 5., 6., -7., 8.]));
        let c = tape.matmul(z, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        assert!(tape.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.starts_with("shape error"), "{err}");
        assert!(tape.matmul_bt(a, b).is_ok());
        let v = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.matmul(v, a).is_err());
    }

    #[test]
    fn no_silent_broadcasting() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.add_bias(a, b).is_ok());
        let wrong = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.add_bias(a, wrong).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax_lastdim(x).unwrap();
        assert!(close(tape.value(y), &[1. / 3.; 3], 1e-15));

        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let y = tape.softmax_lastdim(x).unwrap();
        // e^k / (e + e^2 + e^3)
        let e = std::f64::consts::E;
        let s = e + e * e + e * e * e;
        let oracle = [e / s, e * e / s, e * e * e / s];
        assert!(close(tape.value(y), &oracle, 1e-12));
        assert!(close(tape.value(y), &[0.09003, 0.24473, 0.66524], 1e-5));

        let x = tape.leaf(t(&[3], &[101., 102., 103.]));
        let shifted = tape.softmax_lastdim(x).unwrap();
        assert!(close(tape.value(shifted), tape.value(y), 1e-12));
    }

    #[test]
    fn softmax_is_finite_for_large_inputs() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64(&[2, 3], &[1e3, -1e3, 0., -1e3, -1e3, -1e3]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.leaf(t(&[3], &[1., 1., 1.]));
        let zeros = tape.leaf(t(&[3], &[0., 0., 0.]));
        let y = tape.layer_norm(ones, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0., 0., 0.]);

        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let y = tape.layer_norm(x, ones, zeros, 0.0).unwrap();
        // mean 2, population variance 2/3
        let s = (2.0f64 / 3.0).sqrt();
        assert!(close(tape.value(y), &[-1.0 / s, 0.0, 1.0 / s], 1e-12));
        assert!(close(tape.value(y), &[-1.2247, 0.0, 1.2247], 1e-4));

        let fives = tape.leaf(t(&[3], &[5., 5., 5.]));
        let y = tape.layer_norm(ones, ones, fives, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[5., 5., 5.]);

        // constant slice with eps = 0 stays finite
        let y = tape.layer_norm(ones, ones, zeros, 0.0).unwrap();
        assert_eq!(tape.value(y), &[0., 0., 0.]);
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0., 1., -10.]));
        let s = tape.sigmoid(x).unwrap();
        let th = tape.tanh(x).unwrap();
        let ge = tape.gelu(x).unwrap();
        assert_eq!(tape.value(s)[0], 0.5);
        assert_eq!(tape.value(th)[0], 0.0);
        assert_eq!(tape.value(ge)[0], 0.0);
        // tanh(1) = (e^2 - 1)/(e^2 + 1)
        let e2 = std::f64::consts::E.powi(2);
        assert!((tape.value(th)[1] - (e2 - 1.0) / (e2 + 1.0)).abs() < 1e-15);
        assert!((tape.value(th)[1] - 0.76159).abs() < 1e-5);
        // -10 * Phi(-10) ~ -7.6e-23
        assert!(tape.value(ge)[2].abs() < 1e-6);
    }

    #[test]
    fn backward_linear_and_square() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[3], &[0.5, -1., 2.]).with_requires_grad(true));
        let x = tape.leaf(t(&[3], &[4., 5., 6.]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4., 5., 6.]);
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1., 2.]).with_requires_grad(true));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2., 4.]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1., 2.]).with_requires_grad(true));
        assert!(matches!(tape.backward(w), Err(Error::Shape(_))));

        let mut other = Tape::<f64>::new();
        let foreign = other.leaf(t(&[1], &[1.]));
        assert!(matches!(tape.backward(foreign), Err(Error::Graph(_))));

        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Graph(_))));
        tape.reset();
        assert!(tape.is_empty());
        assert!(matches!(tape.sum(w), Err(Error::Graph(_))));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let frozen = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let live = tape.leaf(t(&[2, 2], &[0.5, 0.1, -0.3, 0.7]).with_requires_grad(true));
        let h = tape.matmul(frozen, frozen).unwrap();
        assert!(!tape.requires_grad(h));
        let y = tape.matmul(h, live).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(h).is_none());
        assert!(tape.grad(live).is_some());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let flat = tape.leaf(t(&[1, 3], &[0.7, 0.7, 0.7]));
        let l = tape.cross_entropy(flat, &[2]).unwrap();
        assert!((tape.value(l)[0] - 3f64.ln()).abs() < 1e-12);

        let sharp = tape.leaf(t(&[1, 3], &[30., -30., -30.]));
        let l2 = tape.cross_entropy(sharp, &[0]).unwrap();
        assert!(tape.value(l2)[0] < 1e-6 && tape.value(l2)[0] >= 0.0);

        let both = tape.leaf(t(&[2, 3], &[0.7, 0.7, 0.7, 30., -30., -30.]));
        let lb = tape.cross_entropy(both, &[2, 0]).unwrap();
        let mean = (tape.value(l)[0] + tape.value(l2)[0]) / 2.0;
        assert!((tape.value(lb)[0] - mean).abs() < 1e-12);

        let err = tape.cross_entropy(both, &[0, 3]).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn slicing_and_concat_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let top = tape.slice_rows(x, 0, 1).unwrap();
        let rest = tape.slice_rows(x, 1, 2).unwrap();
        let back = tape.concat_rows(&[top, rest]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let left = tape.slice_cols(x, 0, 3).unwrap();
        let right = tape.slice_cols(x, 3, 1).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        assert!(tape.slice_rows(x, 2, 2).is_err());
        assert!(tape.slice_cols(x, 0, 0).is_err());
        let m = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(m), &[4., 5., 6., 7.]);
    }
}
