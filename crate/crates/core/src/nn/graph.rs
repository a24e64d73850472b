//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records operations on rank-2 tensors in evaluation order.
//! [`Graph::backward`] consumes the graph and returns the gradient of a scalar
//! node with respect to every node that depends on a parameter leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Constant leaf; no gradient flows into it.
    Input,
    /// Trainable leaf.
    Param,
    MatMul(Var, Var),
    /// `a[n×m] + b[1×m]` broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// `a[n×m] * s[n×1]` row-wise.
    ScaleRows(Var, Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    /// Row sums: `[n×m] → [n×1]`.
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    /// Elementwise multiplication by a fixed mask (dropout).
    Mask(Var, Vec<f64>),
    Concat(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `c = a·b` (+ `c` when `accumulate`), with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the caller passes slices whose extents cover every index reached
    // by the (m, k, n) loop nest under the given strides, and `c` is a distinct
    // contiguous row-major `m × n` buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::shape("matmul", &[k, n], bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            k as isize,
            1,
            bv.data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.len() != av.cols() {
            return Err(Error::shape("add_row", &[1, av.cols()], bv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.len() != av.rows() {
            return Err(Error::shape("scale_rows", &[av.rows(), 1], sv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        if c > 0 {
            for (row, k) in out.data_mut().chunks_mut(c).zip(sv.data()) {
                row.iter_mut().for_each(|x| *x *= k);
            }
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(a, s), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * math::sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::sqrt);
        let rg = self.rg(a);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = av.iter_rows().map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::column(sums), Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: f64 = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::shape("mask", av.shape(), &[mask.len()]));
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mask(a, mask), rg))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat", &[av.rows()], &[bv.rows()]));
        }
        let (p, q) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.rows() * (p + q));
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::matrix(av.rows(), p + q, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Reverse sweep from the scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("graph is empty; run a forward pass first"));
        }
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Backward("loss handle does not belong to this graph"));
        };
        if node.value.len() != 1 {
            return Err(Error::Backward("loss is not a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(node.value.shape().to_vec(), vec![1.0])?);

        let nodes = &self.nodes;
        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if nodes[a.0].requires_grad {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            n as isize,
                            1,
                            bv.data(),
                            1,
                            n as isize,
                            &mut da,
                            false,
                        );
                        accumulate(&mut grads, *a, Tensor::matrix(m, k, da));
                    }
                    if nodes[b.0].requires_grad {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            &mut db,
                            false,
                        );
                        accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                }
                Op::AddRow(a, b) => {
                    let bv = &nodes[b.0].value;
                    if nodes[b.0].requires_grad {
                        let c = out.cols();
                        let mut db = vec![0.0; c];
                        for row in g.iter_rows() {
                            db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                        accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.zip_map(bv, |x, y| x * y)?);
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, g.zip_map(av, |x, y| x * y)?);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::ScaleRows(a, s) => {
                    let (av, sv) = (&nodes[a.0].value, &nodes[s.0].value);
                    let c = av.cols();
                    if nodes[s.0].requires_grad {
                        let ds: Vec<f64> = g
                            .iter_rows()
                            .zip(av.iter_rows())
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                            .collect();
                        accumulate(&mut grads, *s, Tensor::new(sv.shape().to_vec(), ds)?);
                    }
                    if nodes[a.0].requires_grad {
                        let mut da = g;
                        if c > 0 {
                            for (row, k) in da.data_mut().chunks_mut(c).zip(sv.data()) {
                                row.iter_mut().for_each(|x| *x *= k);
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Silu(a) => {
                    let av = &nodes[a.0].value;
                    let da = g.zip_map(av, |gx, x| {
                        let s = math::sigmoid(x);
                        gx * (s + x * s * (1.0 - s))
                    })?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = g.zip_map(out, |gx, y| gx * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = g.zip_map(out, |gx, y| gx * y)?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let da = g.zip_map(out, |gx, y| gx * 0.5 / y)?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let av = &nodes[a.0].value;
                    let da = g.zip_map(av, |gx, x| 2.0 * gx * x)?;
                    accumulate(&mut grads, *a, da);
                }
                Op::SumCols(a) => {
                    let av = &nodes[a.0].value;
                    let c = av.cols();
                    let mut da = Vec::with_capacity(av.len());
                    for &gi in g.data() {
                        da.extend(core::iter::repeat_n(gi, c));
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                Op::Sum(a) => {
                    let av = &nodes[a.0].value;
                    let gi = g.item();
                    accumulate(&mut grads, *a, av.map(|_| gi));
                }
                Op::Mean(a) => {
                    let av = &nodes[a.0].value;
                    let gi = g.item() / av.len().max(1) as f64;
                    accumulate(&mut grads, *a, av.map(|_| gi));
                }
                Op::Mask(a, mask) => {
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(x, m)| x * m).collect(),
                    )?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat(a, b) => {
                    let (p, q) = (nodes[a.0].value.cols(), nodes[b.0].value.cols());
                    let rows = out.rows();
                    let mut da = Vec::with_capacity(rows * p);
                    let mut db = Vec::with_capacity(rows * q);
                    for r in g.iter_rows() {
                        da.extend_from_slice(&r[..p]);
                        db.extend_from_slice(&r[p..]);
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(rows, p, da));
                    accumulate(&mut grads, *b, Tensor::matrix(rows, q, db));
                }
            }
        }
        Ok(Gradients { grads })
    }
}
