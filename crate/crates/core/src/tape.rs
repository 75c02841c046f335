//! Reverse-mode automatic differentiation over dense real arrays.
//!
//! A [`Tape`] records primitive operations in execution order during the
//! forward pass; [`Tape::backward`] replays them in reverse, accumulating
//! adjoints by the chain rule. The graph is dynamic (rebuilt per training
//! step) and every node is a dense row-major matrix; vectors are `(n, 1)`
//! and scalars `(1, 1)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CtpError;
use crate::math;
use crate::params::{GradStore, ParamStore};
use crate::Result;

/// Dense row-major matrix buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Buf {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Buf {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Buf {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer shape mismatch");
        Buf { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Buf::from_vec(1, 1, vec![v])
    }

    pub fn col_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Buf::from_vec(n, 1, data)
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Buf::from_vec(1, n, data)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone)]
enum Op {
    /// Input value; `param` links back to a `ParamStore` slot.
    Leaf { param: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Broadcast-add a `(1, C)` row to every row of an `(R, C)` matrix.
    AddRow(NodeId, NodeId),
    /// Broadcast-multiply every row of an `(R, C)` matrix by a `(1, C)` row.
    MulRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    /// `x^p` for `x >= 0`.
    PowConst(NodeId, f64),
    /// Sum of all entries, producing a scalar.
    Sum(NodeId),
    /// Per-row sum: `(R, C) -> (R, 1)`.
    RowSum(NodeId),
    /// Trace of a square matrix, producing a scalar.
    Trace(NodeId),
    /// Horizontal concatenation of equal-height blocks.
    ConcatCols(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Buf,
}

/// Operation recorder.
///
/// Single-writer: one tape per training step, never shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Buf {
        &self.nodes[id.0 as usize].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let b = self.value(id);
        debug_assert_eq!(b.len(), 1, "expected scalar node");
        b.data[0]
    }

    fn push(&mut self, op: Op, value: Buf) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value });
        id
    }

    /// Enter a constant (non-trainable) value.
    pub fn constant(&mut self, value: Buf) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Enter one parameter array, remembering its store slot.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> NodeId {
        self.push(
            Op::Leaf {
                param: Some(index),
            },
            store.buf(index).clone(),
        )
    }

    /// Enter every array of a store; result is indexed by store slot.
    pub fn bind_params(&mut self, store: &ParamStore) -> Vec<NodeId> {
        (0..store.len()).map(|i| self.param(store, i)).collect()
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let b = self.value(id);
        (b.rows, b.cols)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(x, y)| x + y)
                .collect();
            Buf::from_vec(va.rows, va.cols, data)
        };
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(x, y)| x - y)
                .collect();
            Buf::from_vec(va.rows, va.cols, data)
        };
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(x, y)| x * y)
                .collect();
            Buf::from_vec(va.rows, va.cols, data)
        };
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let va = self.value(a);
        let v = Buf::from_vec(va.rows, va.cols, va.data.iter().map(|x| x * k).collect());
        self.push(Op::Scale(a, k), v)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: row shape mismatch");
        let v = {
            let (va, vr) = (self.value(a), self.value(row));
            let mut out = va.data.clone();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += vr.data[j];
                }
            }
            Buf::from_vec(r, c, out)
        };
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row: row shape mismatch");
        let v = {
            let (va, vr) = (self.value(a), self.value(row));
            let mut out = va.data.clone();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] *= vr.data[j];
                }
            }
            Buf::from_vec(r, c, out)
        };
        self.push(Op::MulRow(a, row), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            let mut out = vec![0.0; r * c];
            matmul_into(&va.data, &vb.data, &mut out, r, k, c);
            Buf::from_vec(r, c, out)
        };
        self.push(Op::Matmul(a, b), v)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let va = self.value(a);
        let v = Buf::from_vec(va.rows, va.cols, va.data.iter().map(|&x| f(x)).collect());
        self.push(op, v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), math::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), math::sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), math::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), math::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), math::sqrt)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `x^p` elementwise; inputs must be nonnegative.
    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(a, Op::PowConst(a, p), |x| math::powf(x, p))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Buf::scalar(s))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let va = self.value(a);
        let data = (0..r)
            .map(|i| va.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(Op::RowSum(a), Buf::from_vec(r, 1, data))
    }

    pub fn trace(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(r, c, "trace: matrix must be square");
        let va = self.value(a);
        let s: f64 = (0..r).map(|i| va.data[i * c + i]).sum();
        self.push(Op::Trace(a), Buf::scalar(s))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).collect::<Vec<_>>().iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, r, "concat_cols: row mismatch");
            for i in 0..r {
                out[i * total + off..i * total + off + vp.cols]
                    .copy_from_slice(&vp.data[i * vp.cols..(i + 1) * vp.cols]);
            }
            off += vp.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), Buf::from_vec(r, total, out))
    }

    /// Scan node values and report the first non-finite one.
    fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(CtpError::NumericFailure(format!(
                    "non-finite value at tape node {} ({})",
                    i,
                    op_name(&n.op)
                )));
            }
        }
        Ok(())
    }

    /// Run the backward pass from seed adjoints at the given nodes.
    ///
    /// Each node is visited exactly once, in reverse recording order; the
    /// pass is deterministic for a fixed tape.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Buf)]) -> Result<Adjoints> {
        self.check_finite()?;
        let mut grads: Vec<Option<Buf>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            let v = self.value(*id);
            assert_eq!(
                (v.rows, v.cols),
                (seed.rows, seed.cols),
                "backward seed shape mismatch"
            );
            match &mut grads[id.0 as usize] {
                Some(g) => g.data.iter_mut().zip(&seed.data).for_each(|(a, b)| *a += b),
                slot => *slot = Some(seed.clone()),
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Adjoints { grads })
    }

    /// Gradient of a scalar loss with respect to every trainable array.
    ///
    /// Arrays the tape never touched get zero gradients.
    pub fn grad(&self, loss: NodeId, store: &ParamStore) -> Result<GradStore> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(CtpError::Config(String::from(
                "grad: loss node must be scalar",
            )));
        }
        if !lv.data[0].is_finite() {
            return Err(CtpError::NumericFailure(format!(
                "non-finite loss value at tape node {}",
                loss.0
            )));
        }
        let adj = self.backward_seeded(&[(loss, Buf::scalar(1.0))])?;
        let mut out = GradStore::zeros_like(store);
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if store.trainable(p) {
                    if let Some(g) = &adj.grads[idx] {
                        out.accumulate(p, g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Buf, grads: &mut [Option<Buf>]) {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, contrib: &mut dyn FnMut(&mut Buf)| {
            let slot = &mut grads[id.0 as usize];
            if slot.is_none() {
                let v = self.value(id);
                *slot = Some(Buf::zeros(v.rows, v.cols));
            }
            contrib(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| add_assign(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| sub_assign(d, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| mul_add_assign(d, g, vb));
                acc(*b, &mut |d| mul_add_assign(d, g, va));
            }
            Op::Scale(a, k) => {
                let k = *k;
                acc(*a, &mut |d| {
                    d.data.iter_mut().zip(&g.data).for_each(|(x, gy)| *x += k * gy)
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*row, &mut |d| {
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            d.data[j] += g.data[i * g.cols + j];
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                acc(*a, &mut |d| {
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            d.data[i * g.cols + j] += g.data[i * g.cols + j] * vr.data[j];
                        }
                    }
                });
                acc(*row, &mut |d| {
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            d.data[j] += g.data[i * g.cols + j] * va.data[i * g.cols + j];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, k) = (va.rows, va.cols);
                let c = vb.cols;
                // dA += G * B^T
                acc(*a, &mut |d| {
                    for i in 0..r {
                        let grow = &g.data[i * c..(i + 1) * c];
                        let drow = &mut d.data[i * k..(i + 1) * k];
                        for kk in 0..k {
                            let brow = &vb.data[kk * c..(kk + 1) * c];
                            let mut s = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                s += gv * bv;
                            }
                            drow[kk] += s;
                        }
                    }
                });
                // dB += A^T * G
                acc(*b, &mut |d| {
                    for i in 0..r {
                        let arow = &va.data[i * k..(i + 1) * k];
                        let grow = &g.data[i * c..(i + 1) * c];
                        for (kk, &av) in arow.iter().enumerate() {
                            let drow = &mut d.data[kk * c..(kk + 1) * c];
                            drow.iter_mut().zip(grow).for_each(|(x, gy)| *x += av * gy);
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    d.data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&y.data)
                        .for_each(|((x, gy), yv)| *x += gy * (1.0 - yv * yv))
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    d.data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&y.data)
                        .for_each(|((x, gy), yv)| *x += gy * yv * (1.0 - yv))
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    d.data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&y.data)
                        .for_each(|((x, gy), yv)| *x += gy * yv)
                });
            }
            Op::Ln(a) => {
                let va = self.value(*a);
                acc(*a, &mut |d| {
                    d.data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&va.data)
                        .for_each(|((x, gy), xv)| *x += gy / xv)
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                // Subgradient 0 at the origin so zero-distance terms stay finite.
                acc(*a, &mut |d| {
                    d.data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&y.data)
                        .for_each(|((x, gy), yv)| {
                            if *yv > 0.0 {
                                *x += gy * 0.5 / yv;
                            }
                        })
                });
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                acc(*a, &mut |d| {
                    d.data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&va.data)
                        .for_each(|((x, gy), xv)| {
                            *x += gy * if *xv > 0.0 {
                                1.0
                            } else if *xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                acc(*a, &mut |d| {
                    d.data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&va.data)
                        .for_each(|((x, gy), xv)| {
                            if *xv > lo && *xv < hi {
                                *x += gy;
                            }
                        })
                });
            }
            Op::PowConst(a, p) => {
                let va = self.value(*a);
                let p = *p;
                acc(*a, &mut |d| {
                    d.data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&va.data)
                        .for_each(|((x, gy), xv)| {
                            if *xv > 0.0 {
                                *x += gy * p * math::powf(*xv, p - 1.0);
                            } else if p == 1.0 {
                                *x += gy;
                            }
                        })
                });
            }
            Op::Sum(a) => {
                let gv = g.data[0];
                acc(*a, &mut |d| d.data.iter_mut().for_each(|x| *x += gv));
            }
            Op::RowSum(a) => {
                let va = self.value(*a);
                let c = va.cols;
                acc(*a, &mut |d| {
                    for i in 0..va.rows {
                        let gv = g.data[i];
                        d.data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x += gv);
                    }
                });
            }
            Op::Trace(a) => {
                let gv = g.data[0];
                let n = self.value(*a).rows;
                acc(*a, &mut |d| {
                    for i in 0..n {
                        d.data[i * n + i] += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols;
                let r = node.value.rows;
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    acc(p, &mut |d| {
                        for i in 0..r {
                            for j in 0..pc {
                                d.data[i * pc + j] += g.data[i * total + off + j];
                            }
                        }
                    });
                    off += pc;
                }
            }
        }
    }
}

/// Result of a backward pass: adjoints per node.
pub struct Adjoints {
    grads: Vec<Option<Buf>>,
}

impl Adjoints {
    pub fn get(&self, id: NodeId) -> Option<&Buf> {
        self.grads[id.0 as usize].as_ref()
    }

    /// Collect parameter gradients from a tape that bound `store`.
    pub fn into_grad_store(self, tape: &Tape, store: &ParamStore) -> GradStore {
        let mut out = GradStore::zeros_like(store);
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if store.trainable(p) {
                    if let Some(g) = &self.grads[idx] {
                        out.accumulate(p, g);
                    }
                }
            }
        }
        out
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Matmul(..) => "matmul",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sqrt(..) => "sqrt",
        Op::Abs(..) => "abs",
        Op::Clamp(..) => "clamp",
        Op::PowConst(..) => "pow_const",
        Op::Sum(..) => "sum",
        Op::RowSum(..) => "row_sum",
        Op::Trace(..) => "trace",
        Op::ConcatCols(..) => "concat_cols",
    }
}

#[inline]
fn add_assign(d: &mut Buf, g: &Buf) {
    d.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
}

#[inline]
fn sub_assign(d: &mut Buf, g: &Buf) {
    d.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y);
}

#[inline]
fn mul_add_assign(d: &mut Buf, g: &Buf, v: &Buf) {
    d.data
        .iter_mut()
        .zip(&g.data)
        .zip(&v.data)
        .for_each(|((x, gy), vv)| *x += gy * vv);
}

/// `out += a * b` for row-major `a: (r, k)`, `b: (k, c)`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * c..(kk + 1) * c];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}
