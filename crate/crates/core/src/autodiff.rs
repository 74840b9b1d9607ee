//! Tape-based reverse-mode automatic differentiation over small dense tensors.
//!
//! Operations evaluate eagerly as they are recorded, so every node's inputs
//! precede it on the tape and the reverse sweep is a plain backwards walk.
//! Element-wise binary operations broadcast along any dimension of size one;
//! the reverse sweep sums gradients back over the broadcast dimension.
//!
//! Besides the generic arithmetic the tape knows a handful of fused primitives
//! the fitting pipeline leans on: Rodrigues rotation, 3x3 rotation products,
//! a weighted Huber-of-norm reduction, and [`RowMap`], a per-row custom map
//! used for joint-limit squashing and camera projection.

use std::sync::Arc;

use thiserror::Error;

use crate::so3;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("input `{slot}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        slot: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("expected {expected} inputs, got {actual}")]
    InputCount { expected: usize, actual: usize },
    #[error("non-finite value produced at tape node {node}")]
    NonFinite { node: usize },
    #[error("program output must be a 1x1 scalar, got {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("function is not finite at probe point (block {block}, index {index})")]
    NonFiniteProbe { block: usize, index: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A per-row map `R^in -> R^out` with a hand-written vector-Jacobian product.
pub trait RowMap: Send + Sync {
    fn in_cols(&self) -> usize;
    fn out_cols(&self) -> usize;
    fn forward(&self, input: &[f64], output: &mut [f64]);
    /// Accumulates `J^T grad_out` into `grad_in`.
    fn backward(&self, input: &[f64], output: &[f64], grad_out: &[f64], grad_in: &mut [f64]);
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Gelu(Var),
    Sum(Var),
    MatMul(Var, Var),
    Columns(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    Rodrigues(Var),
    RotMul(Var, Var),
    RotApply(Var, Var),
    Map(Var, Arc<dyn RowMap>),
    HuberNorm {
        pred: Var,
        target: Arc<Tensor>,
        weights: Arc<[f64]>,
        delta: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of evaluated operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    if a == b || b == 1 {
        a
    } else if a == 1 {
        b
    } else {
        panic!("cannot broadcast dimensions {a} and {b}")
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let rows = broadcast_dim(a.rows(), b.rows());
    let cols = broadcast_dim(a.cols(), b.cols());
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(rows, cols, data);
    }
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let ra = if a.rows() == 1 { 0 } else { r };
        let rb = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols() == 1 { 0 } else { c };
            let cb = if b.cols() == 1 { 0 } else { c };
            out.set(r, c, f(a.get(ra, ca), b.get(rb, cb)));
        }
    }
    out
}

/// Sums `grad` down to `(rows, cols)` over broadcast dimensions.
fn reduce_to(grad: Tensor, rows: usize, cols: usize) -> Tensor {
    if grad.shape() == (rows, cols) {
        return grad;
    }
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..grad.rows() {
        let ro = if rows == 1 { 0 } else { r };
        for c in 0..grad.cols() {
            let co = if cols == 1 { 0 } else { c };
            let v = out.get(ro, co) + grad.get(r, c);
            out.set(ro, co, v);
        }
    }
    out
}

/// Broadcast-aware product `grad * other`, reduced to the operand shape.
fn grad_times(grad: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    broadcast_binary(grad, other, f)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Huber penalty: `r²/2` for `r <= delta`, `delta (r - delta/2)` beyond.
#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// Derivative of [`huber`]; the quadratic branch owns the kink.
#[inline]
pub fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r <= delta {
        r
    } else {
        delta
    }
}

fn row_index(rows: usize, r: usize) -> usize {
    if rows == 1 {
        0
    } else {
        r
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Index of the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.is_finite())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + k)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// Euclidean norm of all entries, `sqrt(sum(a²))`.
    pub fn norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// Matrix product `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
        let mut out = Tensor::zeros(n, m);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg)
    }

    /// Selects columns `idx` of `a`, in that order.
    pub fn columns(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.rows(), idx.len());
        for r in 0..src.rows() {
            for (j, &c) in idx.iter().enumerate() {
                out.set(r, j, src.get(r, c));
            }
        }
        let rg = self.rg(a);
        self.push(Op::Columns(a, idx.into()), out, rg)
    }

    pub fn column(&mut self, a: Var, c: usize) -> Var {
        self.columns(a, &[c])
    }

    /// Horizontal concatenation; row counts must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_slice_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row_slice(r));
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, rg)
    }

    /// Vertical concatenation; column counts must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, data), rg)
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx.iter() {
            data.extend_from_slice(src.row_slice(r));
        }
        let rg = self.rg(a);
        self.push(
            Op::GatherRows(a, idx.clone()),
            Tensor::from_vec(idx.len(), cols, data),
            rg,
        )
    }

    /// Repeats a single-row tensor `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let (r, _) = self.shape(a);
        if r == rows {
            return a;
        }
        assert_eq!(r, 1, "broadcast_rows needs a single-row tensor");
        self.gather_rows(a, vec![0; rows].into())
    }

    /// Row-wise axis-angle (`n x 3`) to rotation matrix (`n x 9`, row-major).
    pub fn rodrigues(&mut self, w: Var) -> Var {
        let src = self.value(w);
        assert_eq!(src.cols(), 3, "rodrigues expects n x 3");
        let mut out = Tensor::zeros(src.rows(), 9);
        for r in 0..src.rows() {
            let s = src.row_slice(r);
            out.row_slice_mut(r)
                .copy_from_slice(&so3::rodrigues(&[s[0], s[1], s[2]]));
        }
        let rg = self.rg(w);
        self.push(Op::Rodrigues(w), out, rg)
    }

    /// Row-wise rotation product `a_i * b_i`; either side may be a single row.
    pub fn rot_mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.cols(), vb.cols()), (9, 9), "rot_mul expects n x 9 operands");
        let rows = broadcast_dim(va.rows(), vb.rows());
        let mut out = Tensor::zeros(rows, 9);
        for r in 0..rows {
            let ma: &so3::Mat3 = va.row_slice(row_index(va.rows(), r)).try_into().unwrap();
            let mb: &so3::Mat3 = vb.row_slice(row_index(vb.rows(), r)).try_into().unwrap();
            out.row_slice_mut(r).copy_from_slice(&so3::mat_mul(ma, mb));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::RotMul(a, b), out, rg)
    }

    /// Row-wise `R_i v_i` with `R` as `n x 9` and `v` as `n x 3`; either may be a single row.
    pub fn rot_apply(&mut self, rot: Var, v: Var) -> Var {
        let (vr, vv) = (self.value(rot), self.value(v));
        assert_eq!((vr.cols(), vv.cols()), (9, 3), "rot_apply expects n x 9 and n x 3");
        let rows = broadcast_dim(vr.rows(), vv.rows());
        let mut out = Tensor::zeros(rows, 3);
        for r in 0..rows {
            let m: &so3::Mat3 = vr.row_slice(row_index(vr.rows(), r)).try_into().unwrap();
            let x: &so3::Vec3 = vv.row_slice(row_index(vv.rows(), r)).try_into().unwrap();
            out.row_slice_mut(r).copy_from_slice(&so3::mat_vec(m, x));
        }
        let rg = self.rg(rot) || self.rg(v);
        self.push(Op::RotApply(rot, v), out, rg)
    }

    /// Applies a custom per-row map.
    pub fn map_rows(&mut self, a: Var, map: Arc<dyn RowMap>) -> Var {
        let src = self.value(a);
        assert_eq!(src.cols(), map.in_cols(), "row map input width mismatch");
        let oc = map.out_cols();
        let mut out = Tensor::zeros(src.rows(), oc);
        for r in 0..src.rows() {
            map.forward(src.row_slice(r), out.row_slice_mut(r));
        }
        let rg = self.rg(a);
        self.push(Op::Map(a, map), out, rg)
    }

    /// `sum_i w_i * huber(|pred_i - target_i|, delta)` over rows, as `1 x 1`.
    pub fn huber_norm_sum(&mut self, pred: Var, target: Arc<Tensor>, weights: Arc<[f64]>, delta: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "huber target shape mismatch");
        assert_eq!(weights.len(), p.rows(), "huber weight count mismatch");
        let mut total = 0.0;
        for r in 0..p.rows() {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let d2: f64 = p
                .row_slice(r)
                .iter()
                .zip(target.row_slice(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += w * huber(d2.sqrt(), delta);
        }
        let rg = self.rg(pred);
        self.push(
            Op::HuberNorm {
                pred,
                target,
                weights,
                delta,
            },
            Tensor::scalar(total),
            rg,
        )
    }

    /// Reverse sweep from the scalar `output`.
    pub fn gradients(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "gradients() needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        if !self.rg(target) {
            return;
        }
        let (rows, cols) = self.shape(target);
        let contribution = reduce_to(contribution, rows, cols);
        match &mut grads[target.0] {
            Some(existing) => existing.axpy(1.0, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let c = grad_times(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, c);
                }
                if self.rg(*b) {
                    let c = grad_times(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.rg(*a) {
                    let c = grad_times(g, vb, |x, y| x / y);
                    self.accumulate(grads, *a, c);
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let t = broadcast_binary(&node.value, vb, |o, y| -o / y);
                    let c = broadcast_binary(g, &t, |x, y| x * y);
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|x| k * x));
            }
            Op::Shift(a) => self.accumulate(grads, *a, g.clone()),
            Op::Square(a) => {
                let c = zip_map(g, self.value(*a), |gx, x| 2.0 * x * gx);
                self.accumulate(grads, *a, c);
            }
            Op::Sqrt(a) => {
                let c = zip_map(g, &node.value, |gx, y| 0.5 * gx / y);
                self.accumulate(grads, *a, c);
            }
            Op::Recip(a) => {
                let c = zip_map(g, &node.value, |gx, y| -gx * y * y);
                self.accumulate(grads, *a, c);
            }
            Op::Tanh(a) => {
                let c = zip_map(g, &node.value, |gx, y| gx * (1.0 - y * y));
                self.accumulate(grads, *a, c);
            }
            Op::Sin(a) => {
                let c = zip_map(g, self.value(*a), |gx, x| gx * x.cos());
                self.accumulate(grads, *a, c);
            }
            Op::Cos(a) => {
                let c = zip_map(g, self.value(*a), |gx, x| -gx * x.sin());
                self.accumulate(grads, *a, c);
            }
            Op::Gelu(a) => {
                let c = zip_map(g, self.value(*a), |gx, x| gx * gelu_derivative(x));
                self.accumulate(grads, *a, c);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    gemm(g, false, vb, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                    gemm(va, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Columns(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for (j, &c) in idx.iter().enumerate() {
                        let v = ga.get(r, c) + g.get(r, j);
                        ga.set(r, c, v);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_slice_mut(r)
                                .copy_from_slice(&g.row_slice(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.rg(p) {
                        let slice = &g.data()[offset * cols..(offset + rows) * cols];
                        self.accumulate(grads, p, Tensor::from_vec(rows, cols, slice.to_vec()));
                    }
                    offset += rows;
                }
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (i, &r) in idx.iter().enumerate() {
                    let src = g.row_slice(i);
                    for (d, s) in ga.row_slice_mut(r).iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Rodrigues(w) => {
                let vw = self.value(*w);
                let mut gw = Tensor::zeros(vw.rows(), 3);
                for r in 0..vw.rows() {
                    let s = vw.row_slice(r);
                    let gr: &so3::Mat3 = g.row_slice(r).try_into().unwrap();
                    gw.row_slice_mut(r)
                        .copy_from_slice(&so3::rodrigues_vjp(&[s[0], s[1], s[2]], gr));
                }
                self.accumulate(grads, *w, gw);
            }
            Op::RotMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let rows = g.rows();
                let mut ga = Tensor::zeros(rows, 9);
                let mut gb = Tensor::zeros(rows, 9);
                for r in 0..rows {
                    let ma: &so3::Mat3 = va.row_slice(row_index(va.rows(), r)).try_into().unwrap();
                    let mb: &so3::Mat3 = vb.row_slice(row_index(vb.rows(), r)).try_into().unwrap();
                    let gr: &so3::Mat3 = g.row_slice(r).try_into().unwrap();
                    // dA = G B^T, dB = A^T G
                    ga.row_slice_mut(r)
                        .copy_from_slice(&so3::mat_mul(gr, &so3::transpose(mb)));
                    gb.row_slice_mut(r)
                        .copy_from_slice(&so3::mat_mul(&so3::transpose(ma), gr));
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::RotApply(rot, v) => {
                let (vr, vv) = (self.value(*rot), self.value(*v));
                let rows = g.rows();
                let mut gr_all = Tensor::zeros(rows, 9);
                let mut gv_all = Tensor::zeros(rows, 3);
                for r in 0..rows {
                    let m: &so3::Mat3 = vr.row_slice(row_index(vr.rows(), r)).try_into().unwrap();
                    let x = vv.row_slice(row_index(vv.rows(), r));
                    let gy: &so3::Vec3 = g.row_slice(r).try_into().unwrap();
                    let gr = gr_all.row_slice_mut(r);
                    for i in 0..3 {
                        for j in 0..3 {
                            gr[3 * i + j] = gy[i] * x[j];
                        }
                    }
                    gv_all.row_slice_mut(r).copy_from_slice(&so3::mat_t_vec(m, gy));
                }
                self.accumulate(grads, *rot, gr_all);
                self.accumulate(grads, *v, gv_all);
            }
            Op::Map(a, map) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    map.backward(
                        va.row_slice(r),
                        node.value.row_slice(r),
                        g.row_slice(r),
                        ga.row_slice_mut(r),
                    );
                }
                self.accumulate(grads, *a, ga);
            }
            Op::HuberNorm {
                pred,
                target,
                weights,
                delta,
            } => {
                let p = self.value(*pred);
                let scale = g.item();
                let mut gp = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let w = weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    let pr = p.row_slice(r);
                    let tr = target.row_slice(r);
                    let d2: f64 = pr.iter().zip(tr).map(|(a, b)| (a - b) * (a - b)).sum();
                    let dist = d2.sqrt();
                    // Quadratic branch: gradient is the residual itself, no division by |r|.
                    let factor = if dist <= *delta { 1.0 } else { delta / dist };
                    for (o, (a, b)) in gp.row_slice_mut(r).iter_mut().zip(pr.iter().zip(tr)) {
                        *o = scale * w * factor * (a - b);
                    }
                }
                self.accumulate(grads, *pred, gp);
            }
        }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.shape(), x.shape());
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data)
}

/// Gradients of one reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled to the shape of `v` if absent.
    pub fn take_or_zeros(&mut self, tape: &Tape, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = tape.shape(v);
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Declared shape of one named input block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientResult {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Records `program` on a fresh tape over `inputs` and returns the scalar value
/// with gradients for every input block.
pub fn evaluate_with_gradients<F>(slots: &[Slot], inputs: &[Tensor], program: F) -> Result<GradientResult, AdError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    if slots.len() != inputs.len() {
        return Err(AdError::InputCount {
            expected: slots.len(),
            actual: inputs.len(),
        });
    }
    for (slot, input) in slots.iter().zip(inputs) {
        if input.shape() != (slot.rows, slot.cols) {
            return Err(AdError::ShapeMismatch {
                slot: slot.name.clone(),
                expected: (slot.rows, slot.cols),
                actual: input.shape(),
            });
        }
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = program(&mut tape, &vars);
    if tape.shape(out) != (1, 1) {
        return Err(AdError::NonScalarOutput(tape.shape(out)));
    }
    if let Some(node) = tape.first_non_finite() {
        return Err(AdError::NonFinite { node });
    }
    let mut grads = tape.gradients(out);
    let value = tape.value(out).item();
    let grads = vars.iter().map(|&v| grads.take_or_zeros(&tape, v)).collect();
    Ok(GradientResult { value, grads })
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, point: &[Tensor], step: f64) -> Result<Vec<Tensor>, AdError>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(AdError::BadStep(step));
    }
    let mut probe: Vec<Tensor> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for block in 0..point.len() {
        let mut g = Tensor::zeros(point[block].rows(), point[block].cols());
        for index in 0..point[block].len() {
            let x0 = point[block].data()[index];
            probe[block].data_mut()[index] = x0 + step;
            let fp = f(&probe);
            probe[block].data_mut()[index] = x0 - step;
            let fm = f(&probe);
            probe[block].data_mut()[index] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(AdError::NonFiniteProbe { block, index });
            }
            g.data_mut()[index] = (fp - fm) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest relative discrepancy `|a - b| / max(|a|, |b|, floor)` across all blocks.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_program(x: f64, build: impl Fn(&mut Tape, Var) -> Var + Copy) -> (GradientResult, Vec<Tensor>) {
        let slots = [Slot::new("x", 1, 1)];
        let input = [Tensor::scalar(x)];
        let res = evaluate_with_gradients(&slots, &input, |t, v| build(t, v[0])).unwrap();
        let fd = finite_difference_gradient(
            |p| {
                let mut t = Tape::new();
                let v = t.input(p[0].clone());
                let o = build(&mut t, v);
                t.value(o).item()
            },
            &input,
            1e-6,
        )
        .unwrap();
        (res, fd)
    }

    #[test]
    fn square_at_three() {
        let (res, _) = scalar_program(3.0, |t, x| t.mul(x, x));
        assert_eq!(res.value, 9.0);
        assert_eq!(res.grads[0].item(), 6.0);
    }

    #[test]
    fn tanh_at_zero() {
        let (res, _) = scalar_program(0.0, |t, x| t.tanh(x));
        assert_eq!(res.value, 0.0);
        assert_eq!(res.grads[0].item(), 1.0);
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|p| p[0].item().powi(2), &[Tensor::scalar(3.0)], 1e-6).unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-6);
        let g = finite_difference_gradient(|p| p[0].item().sin(), &[Tensor::scalar(0.0)], 1e-6).unwrap();
        assert!((g[0].item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_rejects_bad_step_and_non_finite() {
        let p = [Tensor::scalar(1.0)];
        assert_eq!(finite_difference_gradient(|_| 0.0, &p, 0.0), Err(AdError::BadStep(0.0)));
        assert!(matches!(
            finite_difference_gradient(|_| f64::NAN, &p, 1e-3),
            Err(AdError::NonFiniteProbe { block: 0, index: 0 })
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let slots = [Slot::new("w", 2, 3)];
        let err = evaluate_with_gradients(&slots, &[Tensor::zeros(3, 2)], |t, v| t.sum(v[0])).unwrap_err();
        assert!(matches!(err, AdError::ShapeMismatch { .. }));
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let slots = [Slot::new("x", 1, 1)];
        let err = evaluate_with_gradients(&slots, &[Tensor::scalar(-1.0)], |t, v| {
            let s = t.sqrt(v[0]);
            t.sum(s)
        })
        .unwrap_err();
        assert_eq!(err, AdError::NonFinite { node: 1 });
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        // f(a, b) = sum(a (3x2) * b (1x2)) => df/db_j = sum_i a_ij
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let b = Tensor::row(&[0.5, -1.0]);
        let slots = [Slot::new("a", 3, 2), Slot::new("b", 1, 2)];
        let res = evaluate_with_gradients(&slots, &[a.clone(), b.clone()], |t, v| {
            let m = t.mul(v[0], v[1]);
            t.sum(m)
        })
        .unwrap();
        assert_eq!(res.grads[1].data(), &[9.0, 12.0]);
        assert_eq!(res.grads[0].row_slice(2), &[0.5, -1.0]);
    }

    #[test]
    fn huber_derivative_is_continuous_at_the_kink() {
        let delta = 10.0;
        let below = huber(delta, delta);
        let above = delta * (delta - 0.5 * delta);
        assert!((below - above).abs() < 1e-12);
        assert!((huber_derivative(delta, delta) - delta).abs() < 1e-12);
        assert!((huber_derivative(delta + 1e-12, delta) - delta).abs() < 1e-12);
        assert_eq!(huber(1.0, 10.0), 0.5);
        assert_eq!(huber(100.0, 10.0), 950.0);
    }

    #[test]
    fn reverse_sweep_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = Tensor::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect());
        let slots = [Slot::new("a", 4, 5), Slot::new("w", 5, 3)];
        let run = || {
            evaluate_with_gradients(&slots, &[a.clone(), w.clone()], |t, v| {
                let h = t.matmul(v[0], v[1]);
                let h = t.gelu(h);
                let s = t.square(h);
                t.sum(s)
            })
            .unwrap()
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
        for (x, y) in first.grads.iter().zip(&second.grads) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }
}
