//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Var::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//!
//! Nodes are immutable once recorded, and gradient accumulation visits
//! inputs in a fixed order, so repeated runs are bitwise reproducible.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{contract_forward, gemm, split_axis, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    DivConst(usize, Rc<Tensor>),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Contract { x: usize, m: usize, axis: usize },
    Linear(usize, usize),
    Outer(usize, usize),
    SoftmaxRows(usize),
    Squash { raw: usize, scale: f64 },
    Clamp { raw: usize, hi: f64 },
    Relu(usize),
    Conv { x: usize, w: usize, dilation: usize },
    Concat(Vec<usize>),
    Reshape(usize),
    MaxOf(Vec<usize>),
    SumAll(usize),
    Huber {
        pred: usize,
        target: usize,
        delta: f64,
        mask: Option<Rc<Vec<bool>>>,
        count: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so it can be differentiated afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, shape {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Gradients produced by [`Var::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the output does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().as_slice()))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise division by a fixed tensor of the same shape.
    pub fn div_const(&self, d: &Tensor) -> Result<Var<'t>> {
        let v = self.value().zip_map(d, |a, b| a / b)?;
        Ok(self.unary(v, Op::DivConst(self.id, Rc::new(d.clone()))))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let width = *x.shape().last().unwrap_or(&1);
        if b.shape() != [width] {
            return Err(Error::Dimension(format!(
                "bias of shape {:?} does not match last axis {width}",
                b.shape()
            )));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(width) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        Ok(self.binary(bias, out, Op::AddBias(self.id, bias.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Sum of `vars`; all must share a shape.
    pub fn sum_of(vars: &[Var<'t>]) -> Result<Var<'t>> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("sum of zero terms".into()))?;
        rest.iter().try_fold(*first, |acc, v| acc.add(*v))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    /// Contracts `axis` of `self` with the square matrix `m`:
    /// `out[.., i, ..] = sum_j m[i, j] * self[.., j, ..]`.
    pub fn contract_axis(&self, m: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let mv = m.value();
        if axis >= x.rank() {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let n = x.shape()[axis];
        if mv.shape() != [n, n] {
            return Err(Error::Dimension(format!(
                "axis {axis} has length {n} but the matrix has shape {:?}",
                mv.shape()
            )));
        }
        let out = contract_forward(&x, &mv, axis, false);
        Ok(self.binary(m, out, Op::Contract { x: self.id, m: m.id, axis }))
    }

    /// Mode-`mode` product over the trailing `N x T x F` axes (mode 1 = node,
    /// 2 = time, 3 = feature); any leading axes are treated as a batch.
    pub fn mode_product(&self, m: Var<'t>, mode: usize) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if !(1..=3).contains(&mode) || rank < 3 {
            return Err(Error::Dimension(format!(
                "mode {mode} product needs a tensor of rank >= 3, got rank {rank}"
            )));
        }
        self.contract_axis(m, rank - 3 + mode - 1)
    }

    /// `self (.., in) x w (in, out) -> (.., out)`.
    pub fn linear(&self, w: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let (k, n) = wv.matrix_dims("linear")?;
        let width = *x.shape().last().unwrap_or(&0);
        if width != k {
            return Err(Error::Dimension(format!(
                "linear: input width {width} does not match weight rows {k}"
            )));
        }
        let rows = x.len() / k.max(1);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        gemm(rows, k, n, x.data(), k, 1, wv.data(), n, 1, out.data_mut(), n, 1, false);
        Ok(self.binary(w, out, Op::Linear(self.id, w.id)))
    }

    /// Outer product of two vectors.
    pub fn outer(&self, other: Var<'t>) -> Result<Var<'t>> {
        let u = self.value();
        let v = other.value();
        if u.rank() != 1 || v.rank() != 1 || u.is_empty() || v.is_empty() {
            return Err(Error::Dimension(format!(
                "outer expects two nonempty vectors, got {:?} and {:?}",
                u.shape(),
                v.shape()
            )));
        }
        let data = u
            .data()
            .iter()
            .flat_map(|a| v.data().iter().map(move |b| a * b))
            .collect();
        let out = Tensor::new(vec![u.len(), v.len()], data)?;
        Ok(self.binary(other, out, Op::Outer(self.id, other.id)))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (_, c) = a.matrix_dims("softmax_rows")?;
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(self.unary(out, Op::SoftmaxRows(self.id)))
    }

    /// Smooth map of unconstrained reals into `[0, 1 - eps]`:
    /// `(1 - eps) * logistic(x)`.
    pub fn squash01(&self, eps: f64) -> Var<'t> {
        let scale = 1.0 - eps;
        let v = self.value().map(|x| scale * logistic(x));
        self.unary(v, Op::Squash { raw: self.id, scale })
    }

    /// Hard projection onto `[0, 1 - eps]`.
    pub fn clamp01(&self, eps: f64) -> Var<'t> {
        let hi = 1.0 - eps;
        let v = self.value().map(|x| x.clamp(0.0, hi));
        self.unary(v, Op::Clamp { raw: self.id, hi })
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// Dilated causal convolution along the second-to-last (time) axis.
    ///
    /// `self` has shape `(.., T, C_in)` and `filters` has shape
    /// `(k, C_in, C_out)`; the output is `(.., T, C_out)` with
    /// `out[t] = sum_s filters[s]^T x[t - dilation * s]`, treating times
    /// before zero as zero padding.
    pub fn dilated_causal_conv(&self, filters: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = filters.value();
        let r = x.rank();
        if r < 2 || w.rank() != 3 {
            return Err(Error::Dimension(format!(
                "conv expects input (.., T, C) and filters (k, C_in, C_out), got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (t_len, c_in) = (x.shape()[r - 2], x.shape()[r - 1]);
        let (k, wc_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wc_in != c_in {
            return Err(Error::Dimension(format!(
                "conv: input has {c_in} channels, filters expect {wc_in}"
            )));
        }
        if k == 0 || dilation == 0 || t_len == 0 {
            return Err(Error::Dimension(format!(
                "conv needs k >= 1, dilation >= 1 and a nonempty input (k={k}, d={dilation}, T={t_len})"
            )));
        }
        let mut shape = x.shape().to_vec();
        shape[r - 1] = c_out;
        let mut out = Tensor::zeros(&shape);
        let pre = x.len() / (t_len * c_in);
        for s in 0..k {
            let shift = dilation * s;
            if shift >= t_len {
                break;
            }
            let rows = t_len - shift;
            let ws = &w.data()[s * c_in * c_out..(s + 1) * c_in * c_out];
            for p in 0..pre {
                let xs = &x.data()[p * t_len * c_in..];
                let os = &mut out.data_mut()[(p * t_len + shift) * c_out..];
                gemm(rows, c_in, c_out, xs, c_in, 1, ws, c_out, 1, os, c_out, 1, true);
            }
        }
        Ok(self.binary(
            filters,
            out,
            Op::Conv {
                x: self.id,
                w: filters.id,
                dilation,
            },
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(vars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = vars.iter().map(Var::value).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            if &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::Dimension(format!(
                    "concat: leading shapes {:?} and {:?} differ",
                    lead,
                    &v.shape()[..v.rank() - 1]
                )));
            }
            widths.push(*v.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[row * w..(row + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = vars.iter().any(Var::requires_grad);
        let ids = vars.iter().map(|v| v.id).collect();
        Ok(tape.push(Tensor::new(shape, data)?, Op::Concat(ids), rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Elementwise maximum over same-shaped tensors; ties go to the earliest.
    pub fn max_of(vars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::InvalidArgument("max over zero tensors".into()))?;
        let mut out = (*first.value()).clone();
        for v in &vars[1..] {
            out = out.zip_map(&v.value(), f64::max)?;
        }
        let rg = vars.iter().any(Var::requires_grad);
        let ids = vars.iter().map(|v| v.id).collect();
        Ok(first.tape.push(out, Op::MaxOf(ids), rg))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean Huber loss between `self` (prediction) and `target`.
    ///
    /// Quadratic branch `e^2 / 2` for `|e| <= delta`, linear branch
    /// `delta * |e| - delta / 2` otherwise. Entries whose `mask` bit is false
    /// are excluded from both the sum and the count.
    pub fn huber(&self, target: Var<'t>, delta: f64, mask: Option<Rc<Vec<bool>>>) -> Result<Var<'t>> {
        if delta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "huber delta must be positive, got {delta}"
            )));
        }
        let p = self.value();
        let y = target.value();
        p.expect_same_shape(&y, "huber")?;
        if let Some(m) = &mask {
            if m.len() != p.len() {
                return Err(Error::Dimension("huber mask length mismatch".into()));
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for (i, (a, b)) in p.data().iter().zip(y.data()).enumerate() {
            if mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            total += huber_value(a - b, delta);
            count += 1;
        }
        if count == 0 {
            return Err(Error::UndefinedMetric);
        }
        Ok(self.binary(
            target,
            Tensor::scalar(total / count as f64),
            Op::Huber {
                pred: self.id,
                target: target.id,
                delta,
                mask,
                count,
            },
        ))
    }

    /// Reverse pass from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[self.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(Tensor::ones(nodes[self.id].value.shape()));

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn huber_value(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * e.abs() - 0.5 * delta
    }
}

fn huber_slope(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.scale(-1.0));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
            }
            if needs(*b) {
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
        }
        Op::DivConst(a, d) => {
            if needs(*a) {
                accumulate(grads, *a, g.zip_map(d, |x, y| x / y).unwrap());
            }
        }
        Op::AddBias(x, b) => {
            if needs(*x) {
                accumulate(grads, *x, g.clone());
            }
            if needs(*b) {
                let width = val(*b).len();
                let mut gb = Tensor::zeros(&[width]);
                for row in g.data().chunks(width) {
                    for (o, v) in gb.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Scale(a, c) => {
            if needs(*a) {
                accumulate(grads, *a, g.scale(*c));
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if needs(*a) {
                let shaped = Tensor::new(val(*a).shape().to_vec(), g.data().to_vec()).unwrap();
                accumulate(grads, *a, shaped);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if needs(*a) {
                // dA = G B^T
                let mut ga = Tensor::zeros(&[m, k]);
                gemm(m, n, k, g.data(), n, 1, val(*b).data(), 1, n, ga.data_mut(), k, 1, false);
                accumulate(grads, *a, ga);
            }
            if needs(*b) {
                // dB = A^T G
                let mut gb = Tensor::zeros(&[k, n]);
                gemm(k, m, n, val(*a).data(), 1, k, g.data(), n, 1, gb.data_mut(), n, 1, false);
                accumulate(grads, *b, gb);
            }
        }
        Op::Transpose(a) => {
            if needs(*a) {
                accumulate(grads, *a, g.transpose().unwrap());
            }
        }
        Op::Contract { x, m, axis } => {
            let xv = val(*x);
            let mv = val(*m);
            if needs(*x) {
                accumulate(grads, *x, contract_forward(g, mv, *axis, true));
            }
            if needs(*m) {
                let (pre, n, post) = split_axis(xv.shape(), *axis);
                let mut gm = Tensor::zeros(&[n, n]);
                if post == 1 {
                    // dM = G^T X over the flattened outer axes
                    gemm(n, pre, n, g.data(), 1, n, xv.data(), n, 1, gm.data_mut(), n, 1, false);
                } else {
                    for p in 0..pre {
                        let off = p * n * post;
                        gemm(
                            n,
                            post,
                            n,
                            &g.data()[off..],
                            post,
                            1,
                            &xv.data()[off..],
                            1,
                            post,
                            gm.data_mut(),
                            n,
                            1,
                            true,
                        );
                    }
                }
                accumulate(grads, *m, gm);
            }
        }
        Op::Linear(x, w) => {
            let xv = val(*x);
            let wv = val(*w);
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.len() / k.max(1);
            if needs(*x) {
                let mut gx = Tensor::zeros(xv.shape());
                gemm(rows, n, k, g.data(), n, 1, wv.data(), 1, n, gx.data_mut(), k, 1, false);
                accumulate(grads, *x, gx);
            }
            if needs(*w) {
                let mut gw = Tensor::zeros(&[k, n]);
                gemm(k, rows, n, xv.data(), 1, k, g.data(), n, 1, gw.data_mut(), n, 1, false);
                accumulate(grads, *w, gw);
            }
        }
        Op::Outer(u, v) => {
            let uv = val(*u);
            let vv = val(*v);
            let (n, m) = (uv.len(), vv.len());
            if needs(*u) {
                let gu: Vec<f64> = (0..n)
                    .map(|i| (0..m).map(|j| g.data()[i * m + j] * vv.data()[j]).sum())
                    .collect();
                accumulate(grads, *u, Tensor::vector(&gu));
            }
            if needs(*v) {
                let gv: Vec<f64> = (0..m)
                    .map(|j| (0..n).map(|i| g.data()[i * m + j] * uv.data()[i]).sum())
                    .collect();
                accumulate(grads, *v, Tensor::vector(&gv));
            }
        }
        Op::SoftmaxRows(a) => {
            if needs(*a) {
                let y = val(id);
                let c = y.shape()[1].max(1);
                let mut ga = Tensor::zeros(y.shape());
                for ((gr, yr), out) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(ga.data_mut().chunks_mut(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gg), yy) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yy * (gg - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
        Op::Squash { raw, scale } => {
            if needs(*raw) {
                let y = val(id);
                let ga = g
                    .zip_map(y, |gg, yy| gg * yy * (1.0 - yy / scale))
                    .unwrap();
                accumulate(grads, *raw, ga);
            }
        }
        Op::Clamp { raw, hi } => {
            if needs(*raw) {
                let ga = g
                    .zip_map(val(*raw), |gg, x| if (0.0..=*hi).contains(&x) { gg } else { 0.0 })
                    .unwrap();
                accumulate(grads, *raw, ga);
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let ga = g
                    .zip_map(val(*a), |gg, x| if x > 0.0 { gg } else { 0.0 })
                    .unwrap();
                accumulate(grads, *a, ga);
            }
        }
        Op::Conv { x, w, dilation } => {
            let xv = val(*x);
            let wv = val(*w);
            let r = xv.rank();
            let (t_len, c_in) = (xv.shape()[r - 2], xv.shape()[r - 1]);
            let (k, c_out) = (wv.shape()[0], wv.shape()[2]);
            let pre = xv.len() / (t_len * c_in);
            let mut gx = needs(*x).then(|| Tensor::zeros(xv.shape()));
            let mut gw = needs(*w).then(|| Tensor::zeros(wv.shape()));
            for s in 0..k {
                let shift = dilation * s;
                if shift >= t_len {
                    break;
                }
                let rows = t_len - shift;
                let block = c_in * c_out;
                for p in 0..pre {
                    let gs = &g.data()[(p * t_len + shift) * c_out..];
                    if let Some(gx) = gx.as_mut() {
                        let ws = &wv.data()[s * block..(s + 1) * block];
                        // dx[t - shift] += g[t] w_s^T
                        gemm(
                            rows,
                            c_out,
                            c_in,
                            gs,
                            c_out,
                            1,
                            ws,
                            1,
                            c_out,
                            &mut gx.data_mut()[p * t_len * c_in..],
                            c_in,
                            1,
                            true,
                        );
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xs = &xv.data()[p * t_len * c_in..];
                        // dw_s += x[t - shift]^T g[t]
                        gemm(
                            c_in,
                            rows,
                            c_out,
                            xs,
                            1,
                            c_in,
                            gs,
                            c_out,
                            1,
                            &mut gw.data_mut()[s * block..(s + 1) * block],
                            c_out,
                            1,
                            true,
                        );
                    }
                }
            }
            if let Some(gx) = gx {
                accumulate(grads, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, *w, gw);
            }
        }
        Op::Concat(ids) => {
            let widths: Vec<usize> = ids.iter().map(|i| *val(*i).shape().last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total.max(1);
            let mut offset = 0;
            for (&i, &w) in ids.iter().zip(&widths) {
                if needs(i) {
                    let mut part = Vec::with_capacity(rows * w);
                    for row in 0..rows {
                        let start = row * total + offset;
                        part.extend_from_slice(&g.data()[start..start + w]);
                    }
                    accumulate(grads, i, Tensor::new(val(i).shape().to_vec(), part).unwrap());
                }
                offset += w;
            }
        }
        Op::MaxOf(ids) => {
            let out = val(id);
            let mut taken = vec![false; out.len()];
            for &i in ids {
                let v = val(i);
                let mut gi = Tensor::zeros(v.shape());
                for (e, ((&x, &o), t)) in v.data().iter().zip(out.data()).zip(taken.iter_mut()).enumerate() {
                    if !*t && x == o {
                        *t = true;
                        gi.data_mut()[e] = g.data()[e];
                    }
                }
                if needs(i) {
                    accumulate(grads, i, gi);
                }
            }
        }
        Op::SumAll(a) => {
            if needs(*a) {
                accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()));
            }
        }
        Op::Huber {
            pred,
            target,
            delta,
            mask,
            count,
        } => {
            let p = val(*pred);
            let y = val(*target);
            let c = g.item() / *count as f64;
            let mut gp = Tensor::zeros(p.shape());
            for (i, ((o, a), b)) in gp.data_mut().iter_mut().zip(p.data()).zip(y.data()).enumerate() {
                if mask.as_ref().is_some_and(|m| !m[i]) {
                    continue;
                }
                *o = c * huber_slope(a - b, *delta);
            }
            if needs(*target) {
                accumulate(grads, *target, gp.scale(-1.0));
            }
            if needs(*pred) {
                accumulate(grads, *pred, gp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn contract_identity_all_axes() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        for (axis, n) in [(0, 2), (1, 3), (2, 4)] {
            let y = x.contract_axis(tape.constant(Tensor::eye(n)), axis).unwrap();
            assert_eq!(y.value().data(), &data[..]);
        }
    }

    #[test]
    fn contract_permutation_and_hand_product() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1], &[1.0, 2.0]));
        let swap = tape.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(x.contract_axis(swap, 0).unwrap().value().data(), &[2.0, 1.0]);
        let upper = tape.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
        assert_eq!(x.contract_axis(upper, 0).unwrap().value().data(), &[3.0, 2.0]);
    }

    #[test]
    fn contract_rejects_wrong_side() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let err = x.contract_axis(tape.constant(Tensor::eye(2)), 1).unwrap_err();
        assert!(err.to_string().contains("axis 1"));
    }

    #[test]
    fn outer_examples() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::vector(&[2.0]));
        let v = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let o = u.outer(v).unwrap();
        assert_eq!(o.shape(), vec![1, 2]);
        assert_eq!(o.value().data(), &[6.0, 8.0]);
        let o = tape
            .constant(Tensor::vector(&[0.0, 1.0]))
            .outer(tape.constant(Tensor::vector(&[5.0])))
            .unwrap();
        assert_eq!(o.value().data(), &[0.0, 5.0]);
        let o = tape
            .constant(Tensor::vector(&[1.0, 1.0]))
            .outer(tape.constant(Tensor::vector(&[1.0, 1.0])))
            .unwrap();
        assert_eq!(o.value().data(), &[1.0; 4]);
        assert!(tape
            .constant(Tensor::vector(&[]))
            .outer(tape.constant(Tensor::vector(&[1.0])))
            .is_err());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(t(&[1, 2], &[0.0, 0.0])).softmax_rows().unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape
            .constant(t(&[1, 2], &[1f64.ln(), 3f64.ln()]))
            .softmax_rows()
            .unwrap();
        assert_abs_diff_eq!(s.value().data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.value().data()[1], 0.75, epsilon = 1e-15);
        let s = tape.constant(t(&[3, 1], &[4.0, -2.0, 9.0])).softmax_rows().unwrap();
        assert_eq!(s.value().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn hadamard_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        assert_eq!(a.mul(b).unwrap().value().data(), &[3.0, 8.0]);
        let ones = tape.constant(Tensor::ones(&[1, 2]));
        assert_eq!(a.mul(ones).unwrap().value().data(), &[1.0, 2.0]);
        let zeros = tape.constant(Tensor::zeros(&[1, 2]));
        assert_eq!(a.mul(zeros).unwrap().value().data(), &[0.0, 0.0]);
        assert!(a.mul(tape.constant(Tensor::zeros(&[2, 1]))).is_err());
    }

    #[test]
    fn squash_examples() {
        let eps = 1e-3;
        let tape = Tape::new();
        let s = tape.constant(t(&[3], &[0.0, -1e6, 1e6])).squash01(eps);
        let v = s.value();
        assert_abs_diff_eq!(v.data()[0], 0.5 * (1.0 - eps), epsilon = 1e-15);
        assert_eq!(v.data()[1], 0.0);
        assert_abs_diff_eq!(v.data()[2], 1.0 - eps, epsilon = 1e-15);
    }

    #[test]
    fn conv_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let diff = tape.constant(t(&[2, 1, 1], &[1.0, -1.0]));
        let y = x.dilated_causal_conv(diff, 1).unwrap();
        assert_eq!(y.value().data(), &[1.0, 1.0, 1.0, 1.0]);
        let y = x.dilated_causal_conv(diff, 2).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 2.0, 2.0]);
        let id = tape.constant(t(&[1, 1, 1], &[1.0]));
        assert_eq!(x.dilated_causal_conv(id, 3).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(x.dilated_causal_conv(id, 0).is_err());
    }

    #[test]
    fn huber_examples() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::vector(&[1.0]));
        let p = tape.constant(Tensor::vector(&[0.5]));
        assert_abs_diff_eq!(p.huber(y, 1.0, None).unwrap().value().item(), 0.125);
        let y3 = tape.constant(Tensor::vector(&[3.0]));
        let p1 = tape.constant(Tensor::vector(&[1.0]));
        assert_abs_diff_eq!(p1.huber(y3, 1.0, None).unwrap().value().item(), 1.5);
        assert_eq!(y.huber(y, 1.0, None).unwrap().value().item(), 0.0);
        assert!(p.huber(y, 0.0, None).is_err());
    }

    #[test]
    fn huber_seam_uses_quadratic_slope() {
        let tape = Tape::new();
        let p = tape.param(Tensor::vector(&[1.0]));
        let y = tape.constant(Tensor::vector(&[0.0]));
        let g = p.huber(y, 1.0, None).unwrap().backward().unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn max_of_routes_gradient_to_winner() {
        let tape = Tape::new();
        let a = tape.param(Tensor::vector(&[1.0, 5.0]));
        let b = tape.param(Tensor::vector(&[3.0, 5.0]));
        let m = Var::max_of(&[a, b]).unwrap();
        assert_eq!(m.value().data(), &[3.0, 5.0]);
        let g = m.sum().backward().unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let a = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(a.backward().is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::vector(&[1.0, 2.0]));
        let c = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let g = a.mul(c).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
