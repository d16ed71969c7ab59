//! Reverse-mode differentiation over tensor-valued primitives.
//!
//! Model code is written once against [`Backend`]. Running it on [`Eager`]
//! only computes values; running it on a [`Tape`] additionally records every
//! primitive so that [`Tape::backward`] can return gradients for the
//! parameters registered with [`Tape::param`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::mlp::Activation;
use crate::tensor::{self, same_shape, Tensor};

/// Primitive operations shared by the eager and recording backends.
pub trait Backend {
    type V: Clone;

    fn constant(&self, t: Tensor) -> Self::V;
    fn value(&self, v: &Self::V) -> Rc<Tensor>;

    /// `x · wᵀ (+ b)` for `x: [rows, in]`, `w: [out, in]`, `b: [out]`.
    fn affine(&self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn activate(&self, x: &Self::V, act: Activation) -> Result<Self::V>;
    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&self, a: &Self::V, c: f64) -> Result<Self::V>;
    /// `Σ cᵢ · vᵢ` over same-shaped operands.
    fn lin_comb(&self, terms: &[(&Self::V, f64)]) -> Result<Self::V>;
    /// Row-wise matrix-vector product: `m: [rows, C·K]` is read as one
    /// `C×K` matrix per row and multiplied with the matching row of `v: [rows, K]`.
    fn row_contract(&self, m: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn sum(&self, a: &Self::V) -> Result<Self::V>;
    fn mean(&self, a: &Self::V) -> Result<Self::V>;
    /// Mean of squared differences over all elements.
    fn mse(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

fn checked(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

mod kernels {
    use super::*;

    pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let mut y = tensor::matmul_nt(x, w)?;
        if let Some(b) = b {
            tensor::add_row_bias(&mut y, b)?;
        }
        checked("affine", y)
    }

    pub fn activate(x: &Tensor, act: Activation) -> Result<Tensor> {
        Ok(match act {
            Activation::Tanh => x.map(f64::tanh),
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Identity => x.clone(),
        })
    }

    pub fn lin_comb(terms: &[(&Tensor, f64)]) -> Result<Tensor> {
        let (first, c0) = terms
            .first()
            .ok_or_else(|| Error::shape("lin_comb", "no operands"))?;
        let mut out = first.scale(*c0);
        for (t, c) in &terms[1..] {
            out.add_assign_scaled(t, *c)?;
        }
        checked("lin_comb", out)
    }

    pub fn row_contract(m: &Tensor, v: &Tensor) -> Result<Tensor> {
        let rows = v.rows();
        let k = v.cols();
        if m.rows() != rows || k == 0 || m.cols() % k != 0 {
            return Err(Error::shape(
                "row_contract",
                format!("matrix {:?} against vector {:?}", m.shape(), v.shape()),
            ));
        }
        let c = m.cols() / k;
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let mr = m.row(r);
            let vr = v.row(r);
            for (ci, o) in out[r * c..(r + 1) * c].iter_mut().enumerate() {
                *o = mr[ci * k..(ci + 1) * k]
                    .iter()
                    .zip(vr)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        checked("row_contract", Tensor::new(vec![rows, c], out)?)
    }

    pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mse", a, b)?;
        let n = a.len().max(1) as f64;
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        checked("mse", Tensor::scalar(s / n))
    }

    pub fn elementwise(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        same_shape(op, a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        checked(op, Tensor::new(a.shape().to_vec(), data)?)
    }
}

/// Value-only backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type V = Rc<Tensor>;

    fn constant(&self, t: Tensor) -> Self::V {
        Rc::new(t)
    }

    fn value(&self, v: &Self::V) -> Rc<Tensor> {
        Rc::clone(v)
    }

    fn affine(&self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        kernels::affine(x, w, b.map(|b| b.as_ref())).map(Rc::new)
    }

    fn activate(&self, x: &Self::V, act: Activation) -> Result<Self::V> {
        if act == Activation::Identity {
            return Ok(Rc::clone(x));
        }
        kernels::activate(x, act).map(Rc::new)
    }

    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::elementwise("add", a, b, |x, y| x + y).map(Rc::new)
    }

    fn sub(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::elementwise("sub", a, b, |x, y| x - y).map(Rc::new)
    }

    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::elementwise("mul", a, b, |x, y| x * y).map(Rc::new)
    }

    fn scale(&self, a: &Self::V, c: f64) -> Result<Self::V> {
        checked("scale", a.scale(c)).map(Rc::new)
    }

    fn lin_comb(&self, terms: &[(&Self::V, f64)]) -> Result<Self::V> {
        let ts: Vec<(&Tensor, f64)> = terms.iter().map(|(v, c)| (v.as_ref(), *c)).collect();
        kernels::lin_comb(&ts).map(Rc::new)
    }

    fn row_contract(&self, m: &Self::V, v: &Self::V) -> Result<Self::V> {
        kernels::row_contract(m, v).map(Rc::new)
    }

    fn sum(&self, a: &Self::V) -> Result<Self::V> {
        checked("sum", Tensor::scalar(a.sum())).map(Rc::new)
    }

    fn mean(&self, a: &Self::V) -> Result<Self::V> {
        checked("mean", Tensor::scalar(a.sum() / a.len().max(1) as f64)).map(Rc::new)
    }

    fn mse(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::mse(a, b).map(Rc::new)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Affine { x: usize, w: usize, b: Option<usize> },
    Tanh(usize),
    Relu(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    LinComb(Vec<(usize, f64)>),
    RowContract { m: usize, v: usize },
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records primitives in execution order. Nodes are appended only after
/// their inputs, so walking the node list backwards visits every node after
/// all of its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(Rc::new(t.clone()), Op::Param, true)
    }

    fn push(&self, value: Rc<Tensor>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = self.grad_flag(inputs);
        self.push(Rc::new(value), op, needs)
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("loss", "variable does not belong to this tape"))?;
        if root.value.len() != 1 {
            return Err(Error::invalid(
                "loss",
                format!("tape root must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let wants = |j: usize| nodes[j].needs_grad;
            match &node.op {
                Op::Constant => {}
                Op::Param => leaf[i] = Some(g),
                Op::Affine { x, w, b } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*w].value;
                    if wants(*x) {
                        let gx = tensor::matmul_nn(&g.as_matrix(), wv).reshape(xv.shape().to_vec())?;
                        accumulate(&mut grads, *x, gx)?;
                    }
                    if wants(*w) {
                        let acc = grads[*w].get_or_insert_with(|| Tensor::zeros(wv.shape()));
                        tensor::matmul_tn_acc(&g.as_matrix(), &xv.as_matrix(), acc);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            let bshape = nodes[*b].value.shape().to_vec();
                            let acc = grads[*b].get_or_insert_with(|| Tensor::zeros(&bshape));
                            tensor::col_sums_acc(&g, acc.data_mut());
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = kernels::elementwise("tanh'", &g, y, |gv, yv| gv * (1.0 - yv * yv))?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let d = kernels::elementwise("relu'", &g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let d = kernels::elementwise("mul'", &g, &nodes[*b].value, |x, y| x * y)?;
                        accumulate(&mut grads, *a, d)?;
                    }
                    if wants(*b) {
                        let d = kernels::elementwise("mul'", &g, &nodes[*a].value, |x, y| x * y)?;
                        accumulate(&mut grads, *b, d)?;
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::LinComb(terms) => {
                    for &(j, c) in terms {
                        if !wants(j) || c == 0.0 {
                            continue;
                        }
                        match &mut grads[j] {
                            Some(acc) => acc.add_assign_scaled(&g, c)?,
                            slot @ None => *slot = Some(g.scale(c)),
                        }
                    }
                }
                Op::RowContract { m, v } => {
                    let mv = &nodes[*m].value;
                    let vv = &nodes[*v].value;
                    let (rows, k) = (vv.rows(), vv.cols());
                    let c = mv.cols() / k;
                    if wants(*m) {
                        let mut gm = vec![0.0; rows * c * k];
                        for r in 0..rows {
                            let gr = g.row(r);
                            let vr = vv.row(r);
                            for ci in 0..c {
                                let base = r * c * k + ci * k;
                                for j in 0..k {
                                    gm[base + j] = gr[ci] * vr[j];
                                }
                            }
                        }
                        accumulate(&mut grads, *m, Tensor::new(mv.shape().to_vec(), gm)?)?;
                    }
                    if wants(*v) {
                        let mut gv = vec![0.0; rows * k];
                        for r in 0..rows {
                            let gr = g.row(r);
                            let mr = mv.row(r);
                            for ci in 0..c {
                                for j in 0..k {
                                    gv[r * k + j] += gr[ci] * mr[ci * k + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *v, Tensor::new(vv.shape().to_vec(), gv)?)?;
                    }
                }
                Op::Sum(a) => {
                    let s = nodes[*a].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&s, g.data()[0]))?;
                }
                Op::Mean(a) => {
                    let av = &nodes[*a].value;
                    let n = av.len().max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), g.data()[0] / n))?;
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let scale = 2.0 * g.data()[0] / av.len().max(1) as f64;
                    let d = kernels::elementwise("mse'", av, bv, |x, y| scale * (x - y))?;
                    if wants(*b) {
                        accumulate(&mut grads, *b, d.scale(-1.0))?;
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, d)?;
                    }
                }
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) && leaf[i].is_none() {
                leaf[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], j: usize, g: Tensor) -> Result<()> {
    match &mut grads[j] {
        Some(acc) => acc.add_assign_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::invalid("gradient", format!("node {} is not a parameter", v.0)))
    }
}

impl Backend for Tape {
    type V = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.push(Rc::new(t), Op::Constant, false)
    }

    fn value(&self, v: &Var) -> Rc<Tensor> {
        self.val(*v)
    }

    fn affine(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let bv = b.map(|b| self.val(*b));
        let y = kernels::affine(&self.val(*x), &self.val(*w), bv.as_deref())?;
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        Ok(self.record(
            y,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &inputs,
        ))
    }

    fn activate(&self, x: &Var, act: Activation) -> Result<Var> {
        let y = kernels::activate(&self.val(*x), act)?;
        Ok(match act {
            Activation::Tanh => self.record(y, Op::Tanh(x.0), &[*x]),
            Activation::Relu => self.record(y, Op::Relu(x.0), &[*x]),
            Activation::Identity => *x,
        })
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::elementwise("add", &self.val(*a), &self.val(*b), |x, y| x + y)?;
        Ok(self.record(y, Op::Add(a.0, b.0), &[*a, *b]))
    }

    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::elementwise("sub", &self.val(*a), &self.val(*b), |x, y| x - y)?;
        Ok(self.record(y, Op::Sub(a.0, b.0), &[*a, *b]))
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::elementwise("mul", &self.val(*a), &self.val(*b), |x, y| x * y)?;
        Ok(self.record(y, Op::Mul(a.0, b.0), &[*a, *b]))
    }

    fn scale(&self, a: &Var, c: f64) -> Result<Var> {
        let y = checked("scale", self.val(*a).scale(c))?;
        Ok(self.record(y, Op::Scale(a.0, c), &[*a]))
    }

    fn lin_comb(&self, terms: &[(&Var, f64)]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = terms.iter().map(|(v, _)| self.val(**v)).collect();
        let ts: Vec<(&Tensor, f64)> = vals.iter().zip(terms).map(|(t, (_, c))| (t.as_ref(), *c)).collect();
        let y = kernels::lin_comb(&ts)?;
        let inputs: Vec<Var> = terms.iter().map(|(v, _)| **v).collect();
        let op = Op::LinComb(terms.iter().map(|(v, c)| (v.0, *c)).collect());
        Ok(self.record(y, op, &inputs))
    }

    fn row_contract(&self, m: &Var, v: &Var) -> Result<Var> {
        let y = kernels::row_contract(&self.val(*m), &self.val(*v))?;
        Ok(self.record(y, Op::RowContract { m: m.0, v: v.0 }, &[*m, *v]))
    }

    fn sum(&self, a: &Var) -> Result<Var> {
        let y = checked("sum", Tensor::scalar(self.val(*a).sum()))?;
        Ok(self.record(y, Op::Sum(a.0), &[*a]))
    }

    fn mean(&self, a: &Var) -> Result<Var> {
        let av = self.val(*a);
        let y = checked("mean", Tensor::scalar(av.sum() / av.len().max(1) as f64))?;
        Ok(self.record(y, Op::Mean(a.0), &[*a]))
    }

    fn mse(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::mse(&self.val(*a), &self.val(*b))?;
        Ok(self.record(y, Op::Mse(a.0, b.0), &[*a, *b]))
    }
}

/// Central finite-difference gradient of a scalar function of a flat vector.
/// Test oracle; kept here so integration tests and benches share it.
pub fn finite_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Max over components of `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = tape.sum(&x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(&Tensor::vector(vec![3.0, 4.0, 5.0]));
        let loss = tape.mean(&x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Invalid { .. })));
    }

    #[test]
    fn mse_of_affine_matches_finite_differences() {
        let w0 = [0.3, -0.7, 1.1, 0.25, -0.4, 0.9];
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.2, -0.3]);
        let y = t(&[2, 2], &[0.1, 0.4, -0.2, 1.0]);
        let loss_of = |w: &[f64]| {
            let e = Eager;
            let wv = e.constant(t(&[2, 3], w));
            let out = e.affine(&e.constant(x.clone()), &wv, None).unwrap();
            e.mse(&out, &e.constant(y.clone())).unwrap().data()[0]
        };
        let tape = Tape::new();
        let w = tape.param(&t(&[2, 3], &w0));
        let xv = tape.constant(x.clone());
        let out = tape.affine(&xv, &w, None).unwrap();
        let loss = tape.mse(&out, &tape.constant(y.clone())).unwrap();
        let g = tape.backward(loss).unwrap();
        let fd = finite_difference(&w0, 1e-5, loss_of);
        assert!(max_relative_error(g.wrt(w).unwrap().data(), &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn row_contract_gradients_match_finite_differences() {
        // two rows, C = 2, K = 3
        let m0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let v0: Vec<f64> = (0..6).map(|i| (i as f64 * 0.91).cos()).collect();
        let target = t(&[2, 2], &[0.2, -0.1, 0.3, 0.05]);
        let loss_of = |m: &[f64], v: &[f64]| {
            let e = Eager;
            let out = e
                .row_contract(&e.constant(t(&[2, 6], m)), &e.constant(t(&[2, 3], v)))
                .unwrap();
            e.mse(&out, &e.constant(target.clone())).unwrap().data()[0]
        };
        let tape = Tape::new();
        let m = tape.param(&t(&[2, 6], &m0));
        let v = tape.param(&t(&[2, 3], &v0));
        let out = tape.row_contract(&m, &v).unwrap();
        let loss = tape.mse(&out, &tape.constant(target.clone())).unwrap();
        let g = tape.backward(loss).unwrap();
        let fd_m = finite_difference(&m0, 1e-5, |m| loss_of(m, &v0));
        let fd_v = finite_difference(&v0, 1e-5, |v| loss_of(&m0, v));
        assert!(max_relative_error(g.wrt(m).unwrap().data(), &fd_m, 1e-8) < 1e-4);
        assert!(max_relative_error(g.wrt(v).unwrap().data(), &fd_v, 1e-8) < 1e-4);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x * x + 3x) => grad = 2x + 3
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let lin = tape.lin_comb(&[(&sq, 1.0), (&x, 3.0)]).unwrap();
        let loss = tape.sum(&lin).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn non_finite_values_surface_as_errors() {
        let e = Eager;
        let a = e.constant(Tensor::vector(vec![f64::MAX]));
        assert!(matches!(e.scale(&a, 10.0), Err(Error::NonFinite { .. })));
    }
}
