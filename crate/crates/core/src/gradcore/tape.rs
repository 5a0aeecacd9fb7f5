//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operator evaluates eagerly and appends a node holding its value
//! and the indices of its operands. `Tape::backward` walks the nodes in
//! reverse and accumulates adjoints. A tape is confined to one thread.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        kernel: usize,
        pad: usize,
    },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax(usize),
    NormalizeRows(usize),
    ShiftRight(usize),
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    Mse(usize, usize),
    BceLogits {
        logits: usize,
        targets: Vec<T>,
        pos_weight: T,
    },
    Sum(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    idx: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

/// Adjoints produced by [`Tape::backward`]. Only leaves retain theirs.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.idx).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it did not take part
    /// in the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.idx]))
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, value: Tensor<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn value(&self, idx: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.idx].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::filled(lv.shape(), T::one()));

        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            // leaves keep their adjoint; intermediates are released once used
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            let mut acc = |target: usize, delta: Tensor<T>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    if nodes[*a].needs_grad {
                        let mut ga = Tensor::zeros(&[m, k]);
                        matmul_nt_into(g.data(), bv.data(), ga.data_mut(), m, n, k);
                        acc(*a, ga);
                    }
                    if nodes[*b].needs_grad {
                        let mut gb = Tensor::zeros(&[k, n]);
                        matmul_tn_into(av.data(), g.data(), gb.data_mut(), m, k, n);
                        acc(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, b) => {
                    let cols = g.cols();
                    let mut gb = Tensor::zeros(&[1, cols]);
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let ga = zip_map(&g, bv, |x, y| x * y);
                    let gb = zip_map(&g, av, |x, y| x * y);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|x| x * c));
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p].value.cols();
                        let mut gp = Tensor::zeros(&[rows, pc]);
                        for r in 0..rows {
                            gp.row_slice_mut(r)
                                .copy_from_slice(&g.row_slice(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        acc(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pr = nodes[p].value.rows();
                        let data = g.data()[offset * cols..(offset + pr) * cols].to_vec();
                        offset += pr;
                        acc(p, Tensor::new(vec![pr, cols], data)?);
                    }
                }
                Op::SliceCols(src, start) => {
                    let sv = &nodes[*src].value;
                    let mut gs = Tensor::zeros(sv.shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        gs.row_slice_mut(r)[*start..*start + w].copy_from_slice(g.row_slice(r));
                    }
                    acc(*src, gs);
                }
                Op::SliceRows(src, start) => {
                    let sv = &nodes[*src].value;
                    let mut gs = Tensor::zeros(sv.shape());
                    let cols = g.cols();
                    gs.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(*src, gs);
                }
                Op::Transpose(a) => acc(*a, g.transpose()?),
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(*a, g.reshaped(&shape)?);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    kernel,
                    pad,
                } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*w].value;
                    let (t_in, c_in) = (xv.rows(), xv.cols());
                    let (t_out, c_out) = (g.rows(), g.cols());
                    let mut gx = Tensor::zeros(&[t_in, c_in]);
                    let mut gw = Tensor::zeros(wv.shape());
                    let mut gb = Tensor::zeros(&[1, c_out]);
                    for t in 0..t_out {
                        let grow = g.row_slice(t);
                        for (o, &d) in gb.data_mut().iter_mut().zip(grow) {
                            *o += d;
                        }
                        for k in 0..*kernel {
                            let src = t + k;
                            if src < *pad || src - pad >= t_in {
                                continue;
                            }
                            let s = src - pad;
                            for ci in 0..c_in {
                                let wrow = (k * c_in + ci) * c_out;
                                let xval = xv.data()[s * c_in + ci];
                                let mut gsum = T::zero();
                                for co in 0..c_out {
                                    gsum += grow[co] * wv.data()[wrow + co];
                                    gw.data_mut()[wrow + co] += grow[co] * xval;
                                }
                                gx.data_mut()[s * c_in + ci] += gsum;
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*w, gw);
                    acc(*b, gb);
                }
                Op::Sigmoid(a) => acc(*a, zip_map(&g, y, |d, s| d * s * (T::one() - s))),
                Op::Tanh(a) => acc(*a, zip_map(&g, y, |d, t| d * (T::one() - t * t))),
                Op::Relu(a) => acc(
                    *a,
                    zip_map(&g, y, |d, v| if v > T::zero() { d } else { T::zero() }),
                ),
                Op::Softmax(a) | Op::NormalizeRows(a) => {
                    let cols = g.cols();
                    let mut ga = Tensor::zeros(g.shape());
                    let input = &nodes[*a].value;
                    let is_softmax = matches!(node.op, Op::Softmax(_));
                    for r in 0..g.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                        let scale = if is_softmax {
                            T::one()
                        } else {
                            T::one() / input.row_slice(r).iter().copied().sum::<T>()
                        };
                        let out = ga.row_slice_mut(r);
                        for c in 0..cols {
                            out[c] = if is_softmax {
                                yr[c] * (gr[c] - dot)
                            } else {
                                (gr[c] - dot) * scale
                            };
                        }
                    }
                    acc(*a, ga);
                }
                Op::ShiftRight(a) => {
                    let cols = g.cols();
                    let mut ga = Tensor::zeros(g.shape());
                    for r in 0..g.rows() {
                        let gr = g.row_slice(r);
                        let out = ga.row_slice_mut(r);
                        out[..cols.saturating_sub(1)].copy_from_slice(&gr[1..]);
                    }
                    acc(*a, ga);
                }
                Op::Embedding { table, indices } => {
                    let tv = &nodes[*table].value;
                    let mut gt = Tensor::zeros(tv.shape());
                    for (row, &ix) in indices.iter().enumerate() {
                        for (o, &d) in gt.row_slice_mut(ix).iter_mut().zip(g.row_slice(row)) {
                            *o += d;
                        }
                    }
                    acc(*table, gt);
                }
                Op::Mse(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let n = T::lit(av.len() as f64);
                    let two_g = T::lit(2.0) * g.data()[0] / n;
                    let ga = zip_map(av, bv, |x, y| two_g * (x - y));
                    acc(*b, ga.map(|x| -x));
                    acc(*a, ga);
                }
                Op::BceLogits {
                    logits,
                    targets,
                    pos_weight,
                } => {
                    let lv = &nodes[*logits].value;
                    let n = T::lit(lv.len() as f64);
                    let scale = g.data()[0] / n;
                    let data = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&x, &t)| {
                            let s = sigmoid(x);
                            scale * (*pos_weight * t * (s - T::one()) + (T::one() - t) * s)
                        })
                        .collect();
                    acc(*logits, Tensor::new(lv.shape().to_vec(), data)?);
                }
                Op::Sum(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(*a, Tensor::filled(&shape, g.data()[0]));
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    /// First element; meant for scalar losses.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.idx].value.data()[0]
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", &a, &b));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(a.data(), b.data(), out.data_mut(), m, k, n);
        Ok(self.tape.push(out, Op::MatMul(self.idx, other.idx), &[self.idx, other.idx]))
    }

    /// Elementwise sum. A `[1, n]` right operand broadcasts over rows.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() == b.shape() {
            let out = zip_map(&a, &b, |x, y| x + y);
            return Ok(self.tape.push(out, Op::Add(self.idx, other.idx), &[self.idx, other.idx]));
        }
        let (r, c) = a.dims2()?;
        if b.shape() != [1, c] {
            return Err(mismatch("add", &a, &b));
        }
        let mut out = (*a).clone();
        for i in 0..r {
            for (o, &x) in out.row_slice_mut(i).iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        Ok(self.tape.push(out, Op::AddRow(self.idx, other.idx), &[self.idx, other.idx]))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch("sub", &a, &b));
        }
        let out = zip_map(&a, &b, |x, y| x - y);
        Ok(self.tape.push(out, Op::Sub(self.idx, other.idx), &[self.idx, other.idx]))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch("mul", &a, &b));
        }
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.tape.push(out, Op::Mul(self.idx, other.idx), &[self.idx, other.idx]))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * c);
        self.tape.push(out, Op::Scale(self.idx, c), &[self.idx])
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let out = self.value().transpose()?;
        Ok(self.tape.push(out, Op::Transpose(self.idx), &[self.idx]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshaped(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.idx), &[self.idx]))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        if start > end || end > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: a.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&a.row_slice(i)[start..end]);
        }
        let out = Tensor::new(vec![r, end - start], data)?;
        Ok(self.tape.push(out, Op::SliceCols(self.idx, start), &[self.idx]))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        if start > end || end > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let out = Tensor::new(vec![end - start, c], a.data()[start * c..end * c].to_vec())?;
        Ok(self.tape.push(out, Op::SliceRows(self.idx, start), &[self.idx]))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let out = self.value().map(sigmoid);
        self.tape.push(out, Op::Sigmoid(self.idx), &[self.idx])
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let out = self.value().map(|x| x.tanh());
        self.tape.push(out, Op::Tanh(self.idx), &[self.idx])
    }

    pub fn relu(&self) -> Var<'t, T> {
        let out = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.tape.push(out, Op::Relu(self.idx), &[self.idx])
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get probability 0.
    pub fn softmax(&self, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        if let Some(m) = mask {
            if m.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "softmax mask",
                    lhs: a.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = a.row_slice(i);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let o = out.row_slice_mut(i);
            let mut total = 0.0f64;
            for j in 0..c {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j].as_f64();
                }
            }
            let inv = T::lit(1.0 / total);
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        Ok(self.tape.push(out, Op::Softmax(self.idx), &[self.idx]))
    }

    /// Divides every row by its sum. Fails when a row sum is not positive.
    pub fn normalize_rows(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, _) = a.dims2()?;
        let mut out = (*a).clone();
        for i in 0..r {
            let total: f64 = a.row_slice(i).iter().map(|x| x.as_f64()).sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::Numeric(format!("row {i} has non-positive sum {total}")));
            }
            let inv = T::lit(1.0 / total);
            for v in out.row_slice_mut(i) {
                *v *= inv;
            }
        }
        Ok(self.tape.push(out, Op::NormalizeRows(self.idx), &[self.idx]))
    }

    /// `y[:, j] = x[:, j-1]`, `y[:, 0] = 0`.
    pub fn shift_right(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            if c > 0 {
                out.row_slice_mut(i)[1..].copy_from_slice(&a.row_slice(i)[..c - 1]);
            }
        }
        Ok(self.tape.push(out, Op::ShiftRight(self.idx), &[self.idx]))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.idx), &[self.idx])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch("mse", &a, &b));
        }
        let n = a.len().max(1) as f64;
        let total: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::lit(total / n));
        Ok(self.tape.push(out, Op::Mse(self.idx, other.idx), &[self.idx, other.idx]))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against `targets`,
    /// with positive examples weighted by `pos_weight`.
    pub fn bce_with_logits(&self, targets: &[T], pos_weight: T) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: a.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = a.len().max(1) as f64;
        let total: f64 = a
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| (pos_weight * t * softplus(-x) + (T::one() - t) * softplus(x)).as_f64())
            .sum();
        let out = Tensor::scalar(T::lit(total / n));
        Ok(self.tape.push(
            out,
            Op::BceLogits {
                logits: self.idx,
                targets: targets.to_vec(),
                pos_weight,
            },
            &[self.idx],
        ))
    }

    /// Rows of `self` (a lookup table) selected by `indices`.
    pub fn embedding(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        let (rows, cols) = table.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::InvalidPhoneme {
                    index: ix,
                    capacity: rows,
                });
            }
            data.extend_from_slice(table.row_slice(ix));
        }
        let out = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.tape.push(
            out,
            Op::Embedding {
                table: self.idx,
                indices: indices.to_vec(),
            },
            &[self.idx],
        ))
    }

    /// 1-D convolution over time. `self` is `[T, C_in]`, `weight` is
    /// `[kernel * C_in, C_out]` (row `k * C_in + ci`), `bias` is `[1, C_out]`.
    /// Output length is `T + 2 * pad - kernel + 1`.
    pub fn conv1d(
        &self,
        weight: &Var<'t, T>,
        bias: &Var<'t, T>,
        kernel: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (t_in, c_in) = x.dims2()?;
        let (wr, c_out) = w.dims2()?;
        if kernel == 0 || wr != kernel * c_in {
            return Err(mismatch("conv1d weight", &x, &w));
        }
        if b.shape() != [1, c_out] {
            return Err(mismatch("conv1d bias", &w, &b));
        }
        if t_in + 2 * pad < kernel {
            return Err(mismatch("conv1d length", &x, &w));
        }
        let t_out = t_in + 2 * pad - kernel + 1;
        let mut out = Tensor::zeros(&[t_out, c_out]);
        for t in 0..t_out {
            let orow = out.row_slice_mut(t);
            orow.copy_from_slice(b.data());
            for k in 0..kernel {
                let src = t + k;
                if src < pad || src - pad >= t_in {
                    continue;
                }
                let s = src - pad;
                for ci in 0..c_in {
                    let xv = x.data()[s * c_in + ci];
                    let wrow = &w.data()[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        Ok(self.tape.push(
            out,
            Op::Conv1d {
                x: self.idx,
                w: weight.idx,
                b: bias.idx,
                kernel,
                pad,
            },
            &[self.idx, weight.idx, bias.idx],
        ))
    }
}

impl<T: Real> Tape<T> {
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let rows = values.first().map_or(0, |v| v.rows());
        for v in &values {
            let (r, _) = v.dims2()?;
            if r != rows {
                return Err(mismatch("concat_cols", &values[0], v));
            }
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let cols = values.first().map_or(0, |v| v.cols());
        for v in &values {
            let (_, c) = v.dims2()?;
            if c != cols {
                return Err(mismatch("concat_rows", &values[0], v));
            }
        }
        let rows: usize = values.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(ids.clone()), &ids))
    }
}

/// Weights of one LSTM cell. Gate order in the packed matrices is
/// input, forget, cell, output.
#[derive(Clone, Copy)]
pub struct LstmWeights<'t, T: Real> {
    pub w_ih: Var<'t, T>,
    pub w_hh: Var<'t, T>,
    pub bias: Var<'t, T>,
}

/// One step of a standard gated LSTM cell; returns `(h', c')`.
pub fn lstm_step<'t, T: Real>(
    x: &Var<'t, T>,
    h: &Var<'t, T>,
    c: &Var<'t, T>,
    w: &LstmWeights<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let hidden = h.shape()[1];
    let gates = x.matmul(&w.w_ih)?.add(&h.matmul(&w.w_hh)?)?.add(&w.bias)?;
    if gates.shape()[1] != 4 * hidden {
        return Err(Error::ShapeMismatch {
            op: "lstm_step gates",
            lhs: gates.shape(),
            rhs: vec![1, 4 * hidden],
        });
    }
    let i = gates.slice_cols(0, hidden)?.sigmoid();
    let f = gates.slice_cols(hidden, 2 * hidden)?.sigmoid();
    let g = gates.slice_cols(2 * hidden, 3 * hidden)?.tanh();
    let o = gates.slice_cols(3 * hidden, 4 * hidden)?.sigmoid();
    let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_next = o.mul(&c_next.tanh())?;
    Ok((h_next, c_next))
}
