//! Dense f64 tensors and a reverse-mode gradient tape.
//!
//! Values are stored row-major with rank at most 3 (`batch x time x feature`
//! covers every network in the crate). A [`Tape`] records each primitive
//! operation as a node whose parents always have smaller indices, so a single
//! reverse sweep over the node list is a valid topological order for
//! backpropagation.
//!
//! ```
//! use selectfusion::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::fmt;

use thiserror::Error;

pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a single element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("slice {start}..{end} out of range for extent {extent}")]
    BadSlice {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major tensor of rank 1 to 3.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty()
        || shape.len() > MAX_RANK
        || shape.iter().any(|&e| e == 0)
        || shape.iter().product::<usize>() != len
    {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor, rejecting bad shapes and non-finite entries.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "construct" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Shape is still checked.
    pub fn new_unchecked(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor. Panics on an empty vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        validate_shape(shape, n).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape, self.data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    // ── forward kernels shared by the tape ──────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(mismatch("matmul", self, rhs));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn concat(&self, rhs: &Tensor, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        if self.rank() != rhs.rank()
            || self
                .shape
                .iter()
                .zip(&rhs.shape)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(mismatch("concat", self, rhs));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let (la, lb) = (self.shape[axis] * inner, rhs.shape[axis] * inner);
        let mut data = Vec::with_capacity(self.numel() + rhs.numel());
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * la..(o + 1) * la]);
            data.extend_from_slice(&rhs.data[o * lb..(o + 1) * lb]);
        }
        let mut shape = self.shape.clone();
        shape[axis] += rhs.shape[axis];
        Ok(Tensor { shape, data })
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let extent = self.shape[axis];
        if start >= end || end > extent {
            return Err(TensorError::BadSlice { start, end, extent });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Tensor { shape, data })
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n)
                    .map(|k| self.data[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (self.data[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += self.data[o * n * inner + k * inner + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Tensor { shape, data: out })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::BadAxis { axis, rank })
    } else {
        Ok(())
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// ── broadcasting ────────────────────────────────────────────────────────

/// Index plan for a numpy-style broadcast of two operands padded to rank 3.
struct Broadcast {
    out_shape: Vec<usize>,
    dims: [usize; 3],
    a_strides: [usize; 3],
    b_strides: [usize; 3],
}

impl Broadcast {
    fn plan(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Self> {
        let rank = a.rank().max(b.rank());
        let pad = |s: &[usize]| {
            let mut p = [1usize; 3];
            p[3 - s.len()..].copy_from_slice(s);
            p
        };
        let (pa, pb) = (pad(&a.shape), pad(&b.shape));
        let mut dims = [1usize; 3];
        for i in 0..3 {
            dims[i] = match (pa[i], pb[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(mismatch(op, a, b)),
            };
        }
        let strides = |p: [usize; 3]| {
            let mut s = [0usize; 3];
            let mut acc = 1;
            for i in (0..3).rev() {
                s[i] = if p[i] == 1 { 0 } else { acc };
                acc *= p[i];
            }
            s
        };
        Ok(Self {
            out_shape: dims[3 - rank..].to_vec(),
            dims,
            a_strides: strides(pa),
            b_strides: strides(pb),
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d0, d1, d2] = self.dims;
        let mut out = 0;
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    let ia = i * self.a_strides[0] + j * self.a_strides[1] + k * self.a_strides[2];
                    let ib = i * self.b_strides[0] + j * self.b_strides[1] + k * self.b_strides[2];
                    f(out, ia, ib);
                    out += 1;
                }
            }
        }
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let plan = Broadcast::plan(op, a, b)?;
    let mut data = vec![0.0; plan.out_shape.iter().product()];
    plan.for_each(|o, ia, ib| data[o] = f(a.data[ia], b.data[ib]));
    Ok(Tensor {
        shape: plan.out_shape,
        data,
    })
}

/// Sums an output-shaped gradient back onto a (possibly broadcast) operand.
fn unbroadcast(grad: &[f64], operand: &Tensor, other: &Tensor, is_lhs: bool, scale: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; operand.numel()];
    let (a, b) = if is_lhs { (operand, other) } else { (other, operand) };
    if a.shape == b.shape {
        for i in 0..g.len() {
            g[i] = grad[i] * scale(i, i, i);
        }
        return g;
    }
    let plan = Broadcast::plan("unbroadcast", a, b).expect("forward succeeded");
    plan.for_each(|o, ia, ib| {
        let target = if is_lhs { ia } else { ib };
        g[target] += grad[o] * scale(o, ia, ib);
    });
    g
}

// ── tape ────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { a: Var, b: Var, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax { a: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { a: Var, axis: usize },
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    /// Forward value supplied externally, gradient routed to `soft` unchanged.
    StraightThrough { soft: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations with per-node gradient
/// accumulators.
///
/// A tape is single-threaded. Gradients accumulate across calls to
/// [`Tape::backward`] until [`Tape::zero_grad`].
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape in checked mode: every op output is scanned for NaN/Inf.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: true,
        }
    }

    pub fn with_checked(checked: bool) -> Self {
        Self {
            checked,
            ..Self::new()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: gradients are tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.nodes.get(v.0)?;
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push(value, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).concat(self.value(b), axis)?;
        self.push(value, Op::Concat { a, b, axis }, &[a, b])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice(axis, start, end)?;
        self.push(value, Op::Slice { a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax(axis)?;
        self.push(value, Op::Softmax { a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).sum_axis(axis)?;
        self.push(value, Op::SumAxis { a, axis }, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Node whose forward value is `hard` and whose gradient passes to
    /// `soft` as if it were the identity.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(mismatch("straight_through", &hard, self.value(soft)));
        }
        self.push(hard, Op::StraightThrough { soft }, &[soft])
    }

    /// Runs reverse-mode accumulation from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.nodes.get(loss.0).ok_or(TensorError::UnknownVar(loss.0))?;
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape.clone()));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut local);
            match &mut self.grads[idx] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, grad: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut local[v.0] {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                slot => *slot = Some(grad),
            }
        };
        let elementwise = |a: Var, d: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            val(a)
                .data
                .iter()
                .zip(&out.data)
                .zip(g)
                .map(|((&x, &y), &gi)| gi * d(x, y))
                .collect()
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(a, ga);
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    send(b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    send(a, unbroadcast(g, val(a), val(b), true, |_, _, _| 1.0));
                }
                if wants(b) {
                    send(b, unbroadcast(g, val(b), val(a), false, |_, _, _| sign));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if wants(a) {
                    send(a, unbroadcast(g, ta, tb, true, |_, _, ib| tb.data[ib]));
                }
                if wants(b) {
                    send(b, unbroadcast(g, tb, ta, false, |_, ia, _| ta.data[ia]));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if wants(a) {
                    send(a, unbroadcast(g, ta, tb, true, |_, _, ib| 1.0 / tb.data[ib]));
                }
                if wants(b) {
                    send(
                        b,
                        unbroadcast(g, tb, ta, false, |_, ia, ib| {
                            -ta.data[ia] / (tb.data[ib] * tb.data[ib])
                        }),
                    );
                }
            }
            Op::Scale(a, c) => send(a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(a, g.to_vec()),
            Op::StraightThrough { soft } => send(soft, g.to_vec()),
            Op::Concat { a, b, axis } => {
                let (ta, tb) = (val(a), val(b));
                let outer: usize = ta.shape[..axis].iter().product();
                let inner: usize = ta.shape[axis + 1..].iter().product();
                let (la, lb) = (ta.shape[axis] * inner, tb.shape[axis] * inner);
                let mut ga = Vec::with_capacity(ta.numel());
                let mut gb = Vec::with_capacity(tb.numel());
                for o in 0..outer {
                    let base = o * (la + lb);
                    ga.extend_from_slice(&g[base..base + la]);
                    gb.extend_from_slice(&g[base + la..base + la + lb]);
                }
                send(a, ga);
                send(b, gb);
            }
            Op::Slice { a, axis, start } => {
                let ta = val(a);
                let outer: usize = ta.shape[..axis].iter().product();
                let inner: usize = ta.shape[axis + 1..].iter().product();
                let extent = ta.shape[axis];
                let width = out.shape[axis] * inner;
                let mut ga = vec![0.0; ta.numel()];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    ga[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                send(a, ga);
            }
            Op::Sigmoid(a) => send(a, elementwise(a, &|_, y| y * (1.0 - y))),
            Op::Tanh(a) => send(a, elementwise(a, &|_, y| 1.0 - y * y)),
            Op::Relu(a) => send(a, elementwise(a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::Abs(a) => send(a, elementwise(a, &|x, _| x.signum() * (x != 0.0) as u8 as f64)),
            Op::Square(a) => send(a, elementwise(a, &|x, _| 2.0 * x)),
            Op::Sqrt(a) => send(a, elementwise(a, &|_, y| 0.5 / y)),
            Op::Log(a) => send(a, elementwise(a, &|x, _| 1.0 / x)),
            Op::Exp(a) => send(a, elementwise(a, &|_, y| y)),
            Op::Softmax { a, axis } => {
                let shape = &out.shape;
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[axis];
                let mut ga = vec![0.0; out.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * out.data[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] = out.data[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                send(a, ga);
            }
            Op::Sum(a) => send(a, vec![g[0]; val(a).numel()]),
            Op::Mean(a) => {
                let n = val(a).numel();
                send(a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { a, axis } => {
                let ta = val(a);
                let outer: usize = ta.shape[..axis].iter().product();
                let inner: usize = ta.shape[axis + 1..].iter().product();
                let n = ta.shape[axis];
                let mut ga = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            ga[o * n * inner + k * inner + i] = g[o * inner + i];
                        }
                    }
                }
                send(a, ga);
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
