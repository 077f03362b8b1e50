use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that created it; passing it to a
/// different tape is reported as a usage error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs has a single element
    ScalarRhs,
    ScalarLhs,
    /// rhs is one row repeated over the rows of lhs
    RowRhs,
    RowLhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Transpose(usize),
    Concat(Vec<usize>),
    SliceRows(usize, usize),
    Tanh(usize),
    SoftmaxRows(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so every parent precedes its
/// children and [`Tape::backward`] can walk the record in reverse.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input. Gradients are accumulated for leaves only.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "Var used with a foreign tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf, if [`Tape::backward`] has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.idx].grad.as_ref()
    }

    /// Like [`Tape::grad`], but a leaf the loss never reached reads as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.idx].value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(&self.nodes[v.idx])
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        let (m, k) = av.dims2().map_err(|_| Error::dim("matmul", av.shape(), bv.shape()))?;
        let (k2, n) = bv.dims2().map_err(|_| Error::dim("matmul", av.shape(), bv.shape()))?;
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let needs = self.needs(&[a.idx, b.idx]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.idx, b.idx), needs))
    }

    fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            Ok(Broadcast::Same)
        } else if b.len() == 1 {
            Ok(Broadcast::ScalarRhs)
        } else if a.len() == 1 {
            Ok(Broadcast::ScalarLhs)
        } else if is_row_of(b, a) {
            Ok(Broadcast::RowRhs)
        } else if is_row_of(a, b) {
            Ok(Broadcast::RowLhs)
        } else {
            Err(Error::dim(op, a.shape(), b.shape()))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        let bc = Self::broadcast(name, av, bv)?;
        let value = match bc {
            Broadcast::Same => zip_map(av.data(), bv.data(), av.shape(), &f),
            Broadcast::ScalarRhs => {
                let s = bv.data()[0];
                map(av, |x| f(x, s))
            }
            Broadcast::ScalarLhs => {
                let s = av.data()[0];
                map(bv, |x| f(s, x))
            }
            Broadcast::RowRhs => {
                let row = bv.data();
                let data = av
                    .data()
                    .chunks(row.len())
                    .flat_map(|chunk| chunk.iter().zip(row).map(|(&x, &y)| f(x, y)))
                    .collect();
                Tensor::new(av.shape().to_vec(), data)?
            }
            Broadcast::RowLhs => {
                let row = av.data();
                let data = bv
                    .data()
                    .chunks(row.len())
                    .flat_map(|chunk| row.iter().zip(chunk).map(|(&x, &y)| f(x, y)))
                    .collect();
                Tensor::new(bv.shape().to_vec(), data)?
            }
        };
        let needs = self.needs(&[a.idx, b.idx]);
        Ok(self.push(value, mk(a.idx, b.idx, bc), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = map(&self.check(a)?.value, |x| c * x);
        let needs = self.needs(&[a.idx]);
        Ok(self.push(value, Op::Scale(a.idx, c), needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.value.data().iter().sum();
        let needs = self.needs(&[a.idx]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.idx), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.check(a)?.value;
        if v.is_empty() {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[a.idx]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a.idx), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.value.transposed()?;
        let needs = self.needs(&[a.idx]);
        Ok(self.push(value, Op::Transpose(a.idx), needs))
    }

    /// Stacks along the leading axis. Scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let trailing = trailing_shape(self.check(*first)?.value.shape());
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.check(p)?.value;
            if trailing_shape(v.shape()) != trailing {
                return Err(Error::dim("concat", self.value(*first).shape(), v.shape()));
            }
            rows += v.shape().first().copied().unwrap_or(1);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let needs = self.needs(&idx);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(idx), needs))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.check(a)?.value;
        let rows = *v.shape().first().ok_or_else(|| Error::dim("slice", v.shape(), &[end]))?;
        if start >= end || end > rows {
            return Err(Error::dim("slice", v.shape(), &[start, end]));
        }
        let width = v.len() / rows;
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let data = v.data()[start * width..end * width].to_vec();
        let needs = self.needs(&[a.idx]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceRows(a.idx, start), needs))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = map(&self.check(a)?.value, f64::tanh);
        let needs = self.needs(&[a.idx]);
        Ok(self.push(value, Op::Tanh(a.idx), needs))
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = &self.check(a)?.value;
        let width = *v.shape().last().unwrap_or(&1);
        if width == 0 {
            return Err(Error::dim("softmax_rows", v.shape(), &[1]));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs(&[a.idx]);
        Ok(self.push(value, Op::SoftmaxRows(a.idx), needs))
    }

    /// Propagates d`loss` back through the tape and adds the result into the
    /// gradient slot of every leaf. Calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => {
                            for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                                *a += d;
                            }
                        }
                        None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                    }
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a].value.dims2()?;
                    let n = self.nodes[b].value.dims2()?.1;
                    if self.nodes[a].needs_grad {
                        let bv = self.nodes[b].value.data();
                        gemm_nt(&g, bv, slot(&mut grads, a, m * k), m, k, n);
                    }
                    if self.nodes[b].needs_grad {
                        let av = self.nodes[a].value.data();
                        gemm_tn(av, &g, slot(&mut grads, b, k * n), m, k, n);
                    }
                }
                Op::Add(a, b, bc) => {
                    self.reduce_into(&mut grads, a, &g, bc, Side::Lhs, |d, _| d);
                    self.reduce_into(&mut grads, b, &g, bc, Side::Rhs, |d, _| d);
                }
                Op::Sub(a, b, bc) => {
                    self.reduce_into(&mut grads, a, &g, bc, Side::Lhs, |d, _| d);
                    self.reduce_into(&mut grads, b, &g, bc, Side::Rhs, |d, _| -d);
                }
                Op::Mul(a, b, bc) => {
                    self.mul_backward(&mut grads, a, b, &g, bc);
                }
                Op::Scale(a, c) => {
                    let n = g.len();
                    for (s, d) in slot(&mut grads, a, n).iter_mut().zip(&g) {
                        *s += c * d;
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a].value.len();
                    for s in slot(&mut grads, a, n) {
                        *s += g[0];
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a].value.len();
                    let d = g[0] / n as f64;
                    for s in slot(&mut grads, a, n) {
                        *s += d;
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = self.nodes[a].value.dims2()?;
                    let s = slot(&mut grads, a, r * c);
                    for p in 0..r {
                        for q in 0..c {
                            s[p * c + q] += g[q * r + p];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p].value.len();
                        if self.nodes[p].needs_grad {
                            for (s, d) in slot(&mut grads, p, n).iter_mut().zip(&g[offset..offset + n]) {
                                *s += d;
                            }
                        }
                        offset += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let v = &self.nodes[a].value;
                    let width = v.len() / v.shape()[0];
                    let n = v.len();
                    let s = slot(&mut grads, a, n);
                    for (t, d) in s[start * width..start * width + g.len()].iter_mut().zip(&g) {
                        *t += d;
                    }
                }
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.data();
                    let s = slot(&mut grads, a, y.len());
                    for ((t, d), yv) in s.iter_mut().zip(&g).zip(y) {
                        *t += d * (1.0 - yv * yv);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let width = *y.shape().last().unwrap_or(&1);
                    let s = slot(&mut grads, a, y.len());
                    for ((srow, grow), yrow) in s
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(y.data().chunks(width))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(d, yv)| d * yv).sum();
                        for ((t, d), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *t += yv * (d - dot);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn reduce_into(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        g: &[f64],
        bc: Broadcast,
        side: Side,
        f: impl Fn(f64, usize) -> f64,
    ) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let n = self.nodes[target].value.len();
        let s = slot(grads, target, n);
        let full = matches!(
            (bc, side),
            (Broadcast::Same, _)
                | (Broadcast::ScalarRhs, Side::Lhs)
                | (Broadcast::ScalarLhs, Side::Rhs)
                | (Broadcast::RowRhs, Side::Lhs)
                | (Broadcast::RowLhs, Side::Rhs)
        );
        if full {
            for (k, (t, &d)) in s.iter_mut().zip(g).enumerate() {
                *t += f(d, k);
            }
        } else if n == 1 {
            let total: f64 = g.iter().enumerate().map(|(k, &d)| f(d, k)).sum();
            s[0] += total;
        } else {
            for (k, &d) in g.iter().enumerate() {
                s[k % n] += f(d, k);
            }
        }
    }

    fn mul_backward(&self, grads: &mut [Option<Vec<f64>>], a: usize, b: usize, g: &[f64], bc: Broadcast) {
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        // value of the other operand at output position k
        let pick = |vals: &[f64], k: usize| vals[if vals.len() == 1 { 0 } else { k % vals.len() }];
        self.reduce_into(grads, a, g, bc, Side::Lhs, |d, k| d * pick(bv, k));
        self.reduce_into(grads, b, g, bc, Side::Rhs, |d, k| d * pick(av, k));
    }
}

#[derive(Clone, Copy)]
enum Side {
    Lhs,
    Rhs,
}

fn slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn is_row_of(row: &Tensor, mat: &Tensor) -> bool {
    let Ok((_, cols)) = mat.dims2() else {
        return false;
    };
    match row.shape() {
        [n] => *n == cols,
        [1, n] => *n == cols,
        _ => false,
    }
}

fn trailing_shape(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        Vec::new()
    } else {
        shape[1..].to_vec()
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn zip_map(a: &[f64], b: &[f64], shape: &[usize], f: &impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(shape.to_vec(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
        .expect("shape preserved")
}

/// Max-shifted softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    // summed in sorted order so a permuted row gives a permuted output, bit for bit
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    for v in row.iter_mut() {
        *v /= total;
    }
}
