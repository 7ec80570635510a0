//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and the rule needed to push gradients back to its parents. Nodes are
//! appended in evaluation order, so parents always have smaller indices and
//! the graph is acyclic by construction. [`Graph::backward`] sweeps the tape
//! once in reverse.
//!
//! Broadcasting is deliberately narrow: elementwise binary ops accept equal
//! shapes or a one-element operand on either side. Bias rows are added with
//! the explicit [`Graph::add_bias`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise single-input operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Square,
    Reciprocal,
    Sin,
    Cos,
    Tan,
    Atan,
    /// Piecewise quadratic/linear penalty with its knee at |x| = 1.
    SmoothL1,
}

impl Unary {
    pub const ALL: [Unary; 13] = [
        Unary::Neg,
        Unary::Tanh,
        Unary::Relu,
        Unary::Softplus,
        Unary::Exp,
        Unary::Log,
        Unary::Square,
        Unary::Reciprocal,
        Unary::Sin,
        Unary::Cos,
        Unary::Tan,
        Unary::Atan,
        Unary::SmoothL1,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Reciprocal => 1.0 / x,
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tan => x.tan(),
            Unary::Atan => x.atan(),
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            }
        }
    }

    /// d(output)/d(input), given the input `x` and the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Reciprocal => -y * y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tan => 1.0 + y * y,
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::SmoothL1 => x.clamp(-1.0, 1.0),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Binary(Binary, Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Unary, Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single computation graph. Not shared across threads; build one per worker.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the value of `v` into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`; zeros if unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = match (sa.dims2(), sb.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.shape().to_vec(),
                    rhs: sb.shape().to_vec(),
                })
            }
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; n * m];
        gemm_nn(sa.data(), sb.data(), &mut out, n, k, m);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Matmul(a, b), rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::ShapeMismatch {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds a `[1, n]` row to every row of a `[rows, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (rows, cols) = match (tx.dims2(), tb.dims2()) {
            (Some((r, c)), Some((1, c2))) if c == c2 => (r, c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: tx.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        };
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for (d, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::AddBias(x, bias),
            rg,
        ))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.needs(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Adds a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.needs(x);
        self.push(value, Op::Shift(x), rg)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.needs(x);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn reciprocal(&mut self, x: Var) -> Var {
        self.unary(Unary::Reciprocal, x)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }
    pub fn tan(&mut self, x: Var) -> Var {
        self.unary(Unary::Tan, x)
    }
    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(Unary::Atan, x)
    }
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(Unary::SmoothL1, x)
    }

    /// Elementwise clamp; gradient passes only where the input is strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.needs(x);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.needs(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = match t.dims2() {
            Some((r, c)) if len > 0 && start + len <= c => (r, c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "slice_cols",
                    lhs: t.shape().to_vec(),
                    rhs: vec![start, len],
                })
            }
        };
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.concat_check(parts, "concat_cols", |r, _| r)?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.value(p).dims2().unwrap().1)
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.concat_check(parts, "concat_rows", |_, c| c)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            rows += t.dims2().unwrap().0;
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    fn concat_check(
        &self,
        parts: &[Var],
        op: &'static str,
        key: impl Fn(usize, usize) -> usize,
    ) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("{op} of zero tensors")))?;
        let t0 = self.value(*first);
        let (r0, c0) = t0.dims2().ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: t0.shape().to_vec(),
            rhs: vec![],
        })?;
        let want = key(r0, c0);
        for &p in &parts[1..] {
            let t = self.value(p);
            match t.dims2() {
                Some((r, c)) if key(r, c) == want => {}
                _ => {
                    return Err(Error::ShapeMismatch {
                        op,
                        lhs: t0.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
            }
        }
        Ok(want)
    }

    /// Reverse sweep from a one-element root. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(upstream);
                continue;
            }
            let up = upstream.data();
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (n, k) = ta.dims2().unwrap();
                    let m = tb.dims2().unwrap().1;
                    if self.needs(*a) {
                        let mut da = vec![0.0; n * k];
                        gemm_nt(up, tb.data(), &mut da, n, m, k);
                        accumulate(&mut grads, *a, ta.shape(), &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * m];
                        gemm_tn(ta.data(), up, &mut db, n, k, m);
                        accumulate(&mut grads, *b, tb.shape(), &db);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let out_len = up.len();
                    let at = |t: &Tensor, j: usize| {
                        if t.numel() == out_len {
                            t.data()[j]
                        } else {
                            t.item()
                        }
                    };
                    for (side, other, sign) in [(*a, tb, 1.0), (*b, ta, -1.0)] {
                        if !self.needs(side) {
                            continue;
                        }
                        let local: Vec<f64> = (0..out_len)
                            .map(|j| match kind {
                                Binary::Add => up[j],
                                Binary::Sub => sign * up[j],
                                Binary::Mul => up[j] * at(other, j),
                            })
                            .collect();
                        let st = &self.nodes[side.0].value;
                        if st.numel() == out_len {
                            accumulate(&mut grads, side, st.shape(), &local);
                        } else {
                            accumulate(&mut grads, side, st.shape(), &[local.iter().sum()]);
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, upstream.shape(), up);
                    }
                    if self.needs(*bias) {
                        let (rows, cols) = upstream.dims2().unwrap();
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for (d, &u) in db.iter_mut().zip(&up[r * cols..(r + 1) * cols]) {
                                *d += u;
                            }
                        }
                        accumulate(&mut grads, *bias, &[1, cols], &db);
                    }
                }
                Op::Scale(x, c) => {
                    let local: Vec<f64> = up.iter().map(|u| u * c).collect();
                    accumulate(&mut grads, *x, upstream.shape(), &local);
                }
                Op::Shift(x) => accumulate(&mut grads, *x, upstream.shape(), up),
                Op::Unary(kind, x) => {
                    let xin = self.nodes[x.0].value.data();
                    let yout = node.value.data();
                    let local: Vec<f64> = up
                        .iter()
                        .zip(xin.iter().zip(yout))
                        .map(|(u, (&xv, &yv))| u * kind.derivative(xv, yv))
                        .collect();
                    accumulate(&mut grads, *x, upstream.shape(), &local);
                }
                Op::Clamp(x, lo, hi) => {
                    let xin = self.nodes[x.0].value.data();
                    let local: Vec<f64> = up
                        .iter()
                        .zip(xin)
                        .map(|(u, &xv)| if xv > *lo && xv < *hi { *u } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, upstream.shape(), &local);
                }
                Op::Sum(x) | Op::Mean(x) => {
                    let t = &self.nodes[x.0].value;
                    let g = match node.op {
                        Op::Mean(_) => up[0] / t.numel() as f64,
                        _ => up[0],
                    };
                    let local = vec![g; t.numel()];
                    accumulate(&mut grads, *x, t.shape(), &local);
                }
                Op::SliceCols(x, start) => {
                    let t = &self.nodes[x.0].value;
                    let (rows, cols) = t.dims2().unwrap();
                    let len = upstream.dims2().unwrap().1;
                    let mut local = vec![0.0; rows * cols];
                    for r in 0..rows {
                        local[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&up[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, t.shape(), &local);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = upstream.dims2().unwrap();
                    let mut offset = 0;
                    for &p in parts {
                        let t = &self.nodes[p.0].value;
                        let w = t.dims2().unwrap().1;
                        if self.needs(p) {
                            let mut local = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                local.extend_from_slice(
                                    &up[r * total + offset..r * total + offset + w],
                                );
                            }
                            accumulate(&mut grads, p, t.shape(), &local);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = &self.nodes[p.0].value;
                        let n = t.numel();
                        if self.needs(p) {
                            accumulate(&mut grads, p, t.shape(), &up[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
            }
            grads[i] = Some(upstream);
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], local: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (d, &l) in g.data_mut().iter_mut().zip(local) {
                *d += l;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), local.to_vec()).expect("gradient shape"));
        }
    }
}

/// out[n,m] = a[n,k] * b[k,m]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// out[n,k] = a[n,m] * b[k,m]^T
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let ar = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let br = &b[j * m..(j + 1) * m];
            out[i * k + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
}

/// out[k,m] = a[n,k]^T * b[n,m]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}
