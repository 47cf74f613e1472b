//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Node ids are
//! assigned in creation order, which is already a topological order, so
//! [`Tape::backward`] is a single reverse sweep. The tape is rebuilt for each
//! forward pass and never shared between threads.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, S),
    Shift(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Silu(usize),
    Relu(usize),
    Sum(usize),
    Reshape(usize),
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    PadReplicate {
        x: usize,
        pad: usize,
    },
    AddChannel {
        x: usize,
        v: usize,
    },
    Concat(usize, usize),
    Upsample2(usize),
    ChannelNormalize {
        x: usize,
        eps: S,
    },
    LogSoftmax(usize),
    Pick {
        x: usize,
        labels: Vec<usize>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Operation recorder for one forward/backward pass.
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
    names: RefCell<Vec<(String, usize)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar = f64> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, shape={:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
    names: Vec<(String, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, S>) -> Tensor<S> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    /// Gradients of every named parameter leaf, keyed by name.
    pub fn by_name(&self) -> BTreeMap<String, Tensor<S>> {
        self.names
            .iter()
            .filter_map(|(name, id)| {
                self.grads[*id]
                    .as_ref()
                    .map(|g| (name.clone(), g.clone()))
            })
            .collect()
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<S>> {
        self.names
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.grads[*id].as_ref())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(site: &str, expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        site: site.into(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            names: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Leaf that gradients flow into.
    pub fn var(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    /// Named differentiable leaf; its gradient is reported by
    /// [`Gradients::by_name`].
    pub fn param(&self, name: impl Into<String>, value: Tensor<S>) -> Var<'_, S> {
        let v = self.var(value);
        self.names.borrow_mut().push((name.into(), v.id));
        v
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor<S>> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar-shaped `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), S::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            names: self.names.borrow().clone(),
        })
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    id: usize,
    g: Tensor<S>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Mutable gradient buffer for `id`, created as zeros on first touch.
fn grad_buf<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Tensor<S>>],
    id: usize,
) -> Option<&'a mut Tensor<S>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let shape = nodes[id].value.shape().to_vec();
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(shape)))
}

fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    id: usize,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let unary = |grads: &mut [Option<Tensor<S>>], a: usize, f: &dyn Fn(S, S, S) -> S| {
        // f(grad, input, output)
        let data = g
            .data()
            .iter()
            .zip(val(a).data())
            .zip(out.data())
            .map(|((&gv, &x), &y)| f(gv, x, y))
            .collect();
        accumulate(nodes, grads, a, Tensor::from_parts(g.shape().to_vec(), data));
    };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-S::one()));
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                let ga = g.mul(val(b)).expect("shapes checked in forward");
                accumulate(nodes, grads, a, ga);
            }
            if nodes[b].requires_grad {
                let gb = g.mul(val(a)).expect("shapes checked in forward");
                accumulate(nodes, grads, b, gb);
            }
        }
        Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                let ga = g.zip_map(val(b), |gv, bv| gv / bv).expect("checked");
                accumulate(nodes, grads, a, ga);
            }
            if nodes[b].requires_grad {
                // d(a/b)/db = -out / b
                let gb = Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .zip(val(b).data())
                        .map(|((&gv, &y), &bv)| -gv * y / bv)
                        .collect(),
                );
                accumulate(nodes, grads, b, gb);
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Sqrt(a) => unary(grads, *a, &|gv, _, y| gv / (y + y)),
        Op::Exp(a) => unary(grads, *a, &|gv, _, y| gv * y),
        Op::Log(a) => unary(grads, *a, &|gv, x, _| gv / x),
        Op::Tanh(a) => unary(grads, *a, &|gv, _, y| gv * (S::one() - y * y)),
        Op::Sigmoid(a) => unary(grads, *a, &|gv, _, y| gv * y * (S::one() - y)),
        Op::Silu(a) => unary(grads, *a, &|gv, x, _| {
            let s = S::one() / (S::one() + (-x).exp());
            gv * s * (S::one() + x * (S::one() - s))
        }),
        Op::Relu(a) => unary(grads, *a, &|gv, x, _| if x > S::zero() { gv } else { S::zero() }),
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape().to_vec(), gv));
        }
        Op::Reshape(a) => {
            let shaped = Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec());
            accumulate(nodes, grads, *a, shaped);
        }
        Op::Dense { x, w, b } => {
            let (x, w) = (*x, *w);
            let xs = val(x).shape();
            let (n, inp) = (xs[0], xs[1]);
            let outp = val(w).shape()[0];
            let gd = g.data();
            if let Some(b) = *b {
                if let Some(gb) = grad_buf(nodes, grads, b) {
                    let gb = gb.data_mut();
                    for row in gd.chunks_exact(outp) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                }
            }
            if let Some(gw) = grad_buf(nodes, grads, w) {
                let gw = gw.data_mut();
                let xd = val(x).data();
                for ni in 0..n {
                    let xr = &xd[ni * inp..][..inp];
                    for o in 0..outp {
                        let gv = gd[ni * outp + o];
                        for (acc, &xv) in gw[o * inp..][..inp].iter_mut().zip(xr) {
                            *acc = *acc + gv * xv;
                        }
                    }
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, x) {
                let gx = gx.data_mut();
                let wd = val(w).data();
                for ni in 0..n {
                    let gxr = &mut gx[ni * inp..][..inp];
                    for o in 0..outp {
                        let gv = gd[ni * outp + o];
                        for (acc, &wv) in gxr.iter_mut().zip(&wd[o * inp..][..inp]) {
                            *acc = *acc + gv * wv;
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (x, w) = (*x, *w);
            let need_x = nodes[x].requires_grad;
            let need_w = nodes[w].requires_grad;
            let need_b = b.map(|b| nodes[b].requires_grad).unwrap_or(false);
            if !(need_x || need_w || need_b) {
                return;
            }
            let mut gx = need_x.then(|| vec![S::zero(); val(x).len()]);
            let mut gw = need_w.then(|| vec![S::zero(); val(w).len()]);
            let mut gb = need_b.then(|| vec![S::zero(); geom.c_out]);
            kernels::conv2d_backward(
                geom,
                val(x).data(),
                val(w).data(),
                g.data(),
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(gx) = gx {
                accumulate(nodes, grads, x, Tensor::from_parts(val(x).shape().to_vec(), gx));
            }
            if let Some(gw) = gw {
                accumulate(nodes, grads, w, Tensor::from_parts(val(w).shape().to_vec(), gw));
            }
            if let (Some(gb), Some(b)) = (gb, *b) {
                accumulate(nodes, grads, b, Tensor::from_parts(vec![geom.c_out], gb));
            }
        }
        Op::PadReplicate { x, pad } => {
            let x = *x;
            if let Some(gx) = grad_buf(nodes, grads, x) {
                let s = val(x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let gx = gx.data_mut();
                let gd = g.data();
                for plane in 0..n * c {
                    for i in 0..ph {
                        let si = i.saturating_sub(*pad).min(h - 1);
                        for j in 0..pw {
                            let sj = j.saturating_sub(*pad).min(w - 1);
                            let dst = &mut gx[plane * h * w + si * w + sj];
                            *dst = *dst + gd[plane * ph * pw + i * pw + j];
                        }
                    }
                }
            }
        }
        Op::AddChannel { x, v } => {
            accumulate(nodes, grads, *x, g.clone());
            if let Some(gv) = grad_buf(nodes, grads, *v) {
                let per = g.len() / gv.len();
                for (acc, chunk) in gv.data_mut().iter_mut().zip(g.data().chunks_exact(per)) {
                    *acc = *acc + chunk.iter().copied().sum::<S>();
                }
            }
        }
        Op::Concat(a, b) => {
            let (a, b) = (*a, *b);
            let sa = val(a).shape();
            let n = sa[0];
            let la = val(a).len() / n;
            let lb = val(b).len() / n;
            if nodes[a].requires_grad {
                let mut d = Vec::with_capacity(n * la);
                for row in g.data().chunks_exact(la + lb) {
                    d.extend_from_slice(&row[..la]);
                }
                accumulate(nodes, grads, a, Tensor::from_parts(sa.to_vec(), d));
            }
            if nodes[b].requires_grad {
                let mut d = Vec::with_capacity(n * lb);
                for row in g.data().chunks_exact(la + lb) {
                    d.extend_from_slice(&row[la..]);
                }
                accumulate(nodes, grads, b, Tensor::from_parts(val(b).shape().to_vec(), d));
            }
        }
        Op::Upsample2(x) => {
            let x = *x;
            if let Some(gx) = grad_buf(nodes, grads, x) {
                let s = val(x).shape();
                let (h, w) = (s[2], s[3]);
                let planes = s[0] * s[1];
                let gx = gx.data_mut();
                let gd = g.data();
                for p in 0..planes {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let dst = &mut gx[p * h * w + (i / 2) * w + j / 2];
                            *dst = *dst + gd[p * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
            }
        }
        Op::ChannelNormalize { x, eps } => {
            let x = *x;
            if let Some(gx) = grad_buf(nodes, grads, x) {
                let s = val(x).shape();
                let (n, c) = (s[0], s[1]);
                let plane: usize = s[2..].iter().product();
                let xd = val(x).data();
                let yd = out.data();
                let gd = g.data();
                let gx = gx.data_mut();
                for ni in 0..n {
                    for p in 0..plane {
                        let idx = |ci: usize| (ni * c + ci) * plane + p;
                        let r = ((0..c).map(|ci| xd[idx(ci)] * xd[idx(ci)]).sum::<S>() + *eps)
                            .sqrt();
                        let proj: S = (0..c).map(|ci| gd[idx(ci)] * yd[idx(ci)]).sum();
                        for ci in 0..c {
                            let k = idx(ci);
                            gx[k] = gx[k] + (gd[k] - yd[k] * proj) / r;
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let x = *x;
            if let Some(gx) = grad_buf(nodes, grads, x) {
                let k = out.shape()[1];
                for ((gxr, gr), yr) in gx
                    .data_mut()
                    .chunks_exact_mut(k)
                    .zip(g.data().chunks_exact(k))
                    .zip(out.data().chunks_exact(k))
                {
                    let total: S = gr.iter().copied().sum();
                    for ((acc, &gv), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *acc = *acc + gv - y.exp() * total;
                    }
                }
            }
        }
        Op::Pick { x, labels } => {
            let x = *x;
            if let Some(gx) = grad_buf(nodes, grads, x) {
                let k = val(x).shape()[1];
                let gx = gx.data_mut();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * k + l] = gx[i * k + l] + g.data()[i];
                }
            }
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> S {
        self.tape.value_of(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Constant copy of this node's value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.constant(self.value())
    }

    fn binary(
        self,
        other: Var<'t, S>,
        site: &str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var<'t, S>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.shape() != b.shape() {
                return Err(shape_err(site, a.shape(), b.shape()));
            }
            a.zip_map(&b, f)?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    fn unary(self, f: impl Fn(S) -> S, op: Op<S>) -> Var<'t, S> {
        let value = self.tape.value_of(self.id).map(f);
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        self.unary(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn shift(self, c: S) -> Var<'t, S> {
        self.unary(|v| v + c, Op::Shift(self.id))
    }

    /// `a * self + b * other` with constant coefficients.
    pub fn axpby(self, a: S, other: Var<'t, S>, b: S) -> Result<Var<'t, S>> {
        self.scale(a).add(other.scale(b))
    }

    pub fn square(self) -> Var<'t, S> {
        self.mul(self).expect("same shape")
    }

    pub fn sqrt(self) -> Var<'t, S> {
        self.unary(|v| v.sqrt(), Op::Sqrt(self.id))
    }

    pub fn exp(self) -> Var<'t, S> {
        self.unary(|v| v.exp(), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t, S> {
        self.unary(|v| v.ln(), Op::Log(self.id))
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.unary(|v| v.tanh(), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.unary(|v| S::one() / (S::one() + (-v).exp()), Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Var<'t, S> {
        self.unary(|v| v / (S::one() + (-v).exp()), Op::Silu(self.id))
    }

    pub fn relu(self) -> Var<'t, S> {
        self.unary(|v| v.max(S::zero()), Op::Relu(self.id))
    }

    pub fn sum(self) -> Var<'t, S> {
        let value = Tensor::scalar(self.tape.value_of(self.id).sum());
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.tape.value_of(self.id).len();
        self.sum().scale(S::one() / S::from_usize_lossy(n))
    }

    /// Inner product of two equally shaped nodes.
    pub fn dot(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        Ok(self.mul(other)?.sum())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>> {
        let value = self.tape.value_of(self.id).reshape(shape)?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Fully connected map: `x [N, I]`, `w [O, I]`, optional `b [O]`.
    pub fn dense(self, w: Var<'t, S>, b: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let wv = self.tape.value_of(w.id);
            let (xs, ws) = (x.shape(), wv.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
                return Err(shape_err("dense", &[xs[0], ws.get(1).copied().unwrap_or(0)], xs));
            }
            let bv = b.map(|b| self.tape.value_of(b.id));
            if let Some(bv) = &bv {
                if bv.shape() != [ws[0]] {
                    return Err(shape_err("dense bias", &[ws[0]], bv.shape()));
                }
            }
            let data =
                kernels::dense_forward(xs[0], xs[1], ws[0], x.data(), wv.data(), bv.as_ref().map(|b| b.data()));
            Tensor::from_parts(vec![xs[0], ws[0]], data)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.rg(&ids);
        Ok(self.tape.push(
            value,
            Op::Dense {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    /// Zero-padded 2-D convolution: `x [N, C, H, W]`, `w [O, C, k, k]`.
    pub fn conv2d(
        self,
        w: Var<'t, S>,
        b: Option<Var<'t, S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, S>> {
        let (value, geom) = {
            let x = self.tape.value_of(self.id);
            let wv = self.tape.value_of(w.id);
            let (xs, ws) = (x.shape(), wv.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
                return Err(shape_err("conv2d", &[xs[0], ws[1], 0, 0], xs));
            }
            if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
                return Err(Error::InvalidArgument(format!(
                    "conv2d kernel {} stride {stride} pad {pad} does not fit input {:?}",
                    ws[2], xs
                )));
            }
            let geom = ConvGeom {
                n: xs[0],
                c_in: xs[1],
                h: xs[2],
                w: xs[3],
                c_out: ws[0],
                k: ws[2],
                stride,
                pad,
            };
            let bv = b.map(|b| self.tape.value_of(b.id));
            if let Some(bv) = &bv {
                if bv.shape() != [ws[0]] {
                    return Err(shape_err("conv2d bias", &[ws[0]], bv.shape()));
                }
            }
            let data = kernels::conv2d_forward(&geom, x.data(), wv.data(), bv.as_ref().map(|b| b.data()));
            (
                Tensor::from_parts(vec![geom.n, geom.c_out, geom.out_h(), geom.out_w()], data),
                geom,
            )
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.rg(&ids);
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Edge-replicating spatial padding of an image tensor.
    pub fn pad_replicate(self, pad: usize) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let s = x.shape();
            if s.len() != 4 {
                return Err(shape_err("pad_replicate", &[0, 0, 0, 0], s));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            let xd = x.data();
            let mut data = Vec::with_capacity(n * c * ph * pw);
            for plane in 0..n * c {
                for i in 0..ph {
                    let si = i.saturating_sub(pad).min(h - 1);
                    for j in 0..pw {
                        let sj = j.saturating_sub(pad).min(w - 1);
                        data.push(xd[plane * h * w + si * w + sj]);
                    }
                }
            }
            Tensor::from_parts(vec![n, c, ph, pw], data)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::PadReplicate { x: self.id, pad }, rg))
    }

    /// Adds a per-sample, per-channel vector `v [N, C]` to `x [N, C, ...]`.
    pub fn add_channel(self, v: Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let vv = self.tape.value_of(v.id);
            let (xs, vs) = (x.shape(), vv.shape());
            if xs.len() < 2 || vs != &xs[..2] {
                return Err(shape_err("add_channel", &xs[..xs.len().min(2)], vs));
            }
            let per = x.len() / vv.len();
            let mut data = x.data().to_vec();
            for (chunk, &b) in data.chunks_exact_mut(per).zip(vv.data()) {
                chunk.iter_mut().for_each(|d| *d = *d + b);
            }
            Tensor::from_parts(xs.to_vec(), data)
        };
        let rg = self.tape.rg(&[self.id, v.id]);
        Ok(self.tape.push(value, Op::AddChannel { x: self.id, v: v.id }, rg))
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat_channels(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
                return Err(shape_err("concat", sa, sb));
            }
            let n = sa[0];
            let (la, lb) = (a.len() / n, b.len() / n);
            let mut data = Vec::with_capacity(a.len() + b.len());
            for i in 0..n {
                data.extend_from_slice(&a.data()[i * la..][..la]);
                data.extend_from_slice(&b.data()[i * lb..][..lb]);
            }
            let mut shape = sa.to_vec();
            shape[1] += sb[1];
            Tensor::from_parts(shape, data)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::Concat(self.id, other.id), rg))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(self) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let s = x.shape();
            if s.len() != 4 {
                return Err(shape_err("upsample2", &[0, 0, 0, 0], s));
            }
            let (h, w) = (s[2], s[3]);
            let mut data = Vec::with_capacity(x.len() * 4);
            for plane in x.data().chunks_exact(h * w) {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        data.push(plane[(i / 2) * w + j / 2]);
                    }
                }
            }
            Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], data)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::Upsample2(self.id), rg))
    }

    /// Divides each spatial position's channel vector by
    /// `sqrt(|v|^2 + eps)`.
    pub fn normalize_channels(self, eps: S) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let s = x.shape();
            if s.len() < 2 {
                return Err(shape_err("normalize_channels", &[0, 0], s));
            }
            let (n, c) = (s[0], s[1]);
            let plane: usize = s[2..].iter().product();
            let xd = x.data();
            let mut data = vec![S::zero(); x.len()];
            for ni in 0..n {
                for p in 0..plane {
                    let idx = |ci: usize| (ni * c + ci) * plane + p;
                    let r = ((0..c).map(|ci| xd[idx(ci)] * xd[idx(ci)]).sum::<S>() + eps).sqrt();
                    for ci in 0..c {
                        data[idx(ci)] = xd[idx(ci)] / r;
                    }
                }
            }
            Tensor::from_parts(s.to_vec(), data)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::ChannelNormalize { x: self.id, eps }, rg))
    }

    /// Row-wise log-softmax of `x [N, K]`.
    pub fn log_softmax(self) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let s = x.shape();
            if s.len() != 2 {
                return Err(shape_err("log_softmax", &[0, 0], s));
            }
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks_exact(s[1]) {
                let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
                data.extend(row.iter().map(|&v| v - lse));
            }
            Tensor::from_parts(s.to_vec(), data)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, Op::LogSoftmax(self.id), rg))
    }

    /// Selects `x[n, labels[n]]` from `x [N, K]`, giving shape `[N]`.
    pub fn pick(self, labels: &[usize]) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let s = x.shape();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(shape_err("pick", &[labels.len(), 0], s));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
                return Err(Error::InvalidLabel {
                    label: bad,
                    classes: s[1],
                });
            }
            let data = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| x.data()[i * s[1] + l])
                .collect();
            Tensor::from_parts(vec![labels.len()], data)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Pick {
                x: self.id,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }
}

/// Central finite-difference gradient of a scalar function.
///
/// Used by tests as the independent oracle for [`Tape::backward`].
pub fn finite_difference<S: Scalar>(
    x: &Tensor<S>,
    h: S,
    mut f: impl FnMut(&Tensor<S>) -> S,
) -> Tensor<S> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn assert_grad_close(auto: &Tensor<f64>, fd: &Tensor<f64>, tol: f64) {
        assert_eq!(auto.shape(), fd.shape());
        for (i, (&a, &b)) in auto.data().iter().zip(fd.data()).enumerate() {
            assert!(rel_err(a, b) <= tol, "coord {i}: autodiff {a} vs fd {b}");
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn square_at_three() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(3.0));
        let loss = x.square();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn dense_sum_gradient_is_outer_product_of_ones_and_input() {
        let tape = Tape::<f64>::new();
        let v = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let w = tape.param("w", Tensor::randn(vec![2, 3], &mut rng()));
        let loss = tape.constant(v.clone()).dense(w, None).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let gw = g.named("w").unwrap();
        assert_eq!(gw.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn cosine_distance_is_stationary_at_identity() {
        let tape = Tape::<f64>::new();
        let u = tape.var(Tensor::from_vec(vec![0.3, -1.2, 0.7]));
        let uc = tape.constant(u.value());
        let cos = u.dot(uc).unwrap().div(u.dot(u).unwrap().sqrt().mul(uc.dot(uc).unwrap().sqrt()).unwrap()).unwrap();
        let loss = cos.scale(-1.0).shift(1.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(u).unwrap().norm() <= 1e-10);
    }

    /// Builds a loss through one operator kind and compares all input
    /// gradients with central differences.
    fn check_op(
        inputs: Vec<Tensor<f64>>,
        build: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
    ) {
        let eval = |ins: &[Tensor<f64>]| {
            let tape = Tape::new();
            let vars: Vec<_> = ins.iter().map(|t| tape.var(t.clone())).collect();
            build(&tape, &vars).item()
        };
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(loss).unwrap();
        for (k, input) in inputs.iter().enumerate() {
            let fd = finite_difference(input, 1e-5, |probe| {
                let mut ins = inputs.clone();
                ins[k] = probe.clone();
                eval(&ins)
            });
            assert_grad_close(&grads.get_or_zeros(vars[k]), &fd, 1e-4);
        }
    }

    /// Weighted sum so every output coordinate carries a distinct weight.
    fn probe_loss<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Var<'t, f64> {
        let n = y.value().len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let wt = tape.constant(Tensor::new(y.shape(), w).unwrap());
        y.mul(wt).unwrap().sum()
    }

    #[test]
    fn gradcheck_elementwise() {
        let mut r = rng();
        let a = Tensor::randn(vec![2, 3], &mut r);
        let b = Tensor::<f64>::randn(vec![2, 3], &mut r).map(|v| v.abs() + 0.5);
        check_op(vec![a.clone(), b.clone()], |t, v| {
            let y = v[0].mul(v[1]).unwrap().add(v[0].div(v[1]).unwrap()).unwrap();
            let y = y.sub(v[1].sqrt()).unwrap().add(v[1].ln()).unwrap();
            let y = y.add(v[0].tanh()).unwrap().add(v[0].silu()).unwrap();
            let y = y.add(v[0].sigmoid()).unwrap().add(v[0].scale(0.3).exp()).unwrap();
            probe_loss(t, y.shift(0.2))
        });
    }

    #[test]
    fn gradcheck_dense() {
        let mut r = rng();
        check_op(
            vec![
                Tensor::randn(vec![3, 4], &mut r),
                Tensor::randn(vec![5, 4], &mut r),
                Tensor::randn(vec![5], &mut r),
            ],
            |t, v| probe_loss(t, v[0].dense(v[1], Some(v[2])).unwrap().tanh()),
        );
    }

    #[test]
    fn gradcheck_conv_strided_and_padded() {
        let mut r = rng();
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
            check_op(
                vec![
                    Tensor::randn(vec![2, 2, 6, 6], &mut r),
                    Tensor::randn(vec![3, 2, k, k], &mut r),
                    Tensor::randn(vec![3], &mut r),
                ],
                move |t, v| probe_loss(t, v[0].conv2d(v[1], Some(v[2]), stride, pad).unwrap()),
            );
        }
    }

    #[test]
    fn gradcheck_spatial_ops() {
        let mut r = rng();
        check_op(
            vec![
                Tensor::randn(vec![2, 2, 3, 3], &mut r),
                Tensor::randn(vec![2, 2], &mut r),
                Tensor::randn(vec![2, 1, 6, 6], &mut r),
            ],
            |t, v| {
                let a = v[0].pad_replicate(2).unwrap(); // 7x7
                let a = v[0].add_channel(v[1]).unwrap().upsample2().unwrap().add(
                    a.conv2d(t.constant(Tensor::ones(vec![2, 2, 2, 2])), None, 1, 0).unwrap(),
                ).unwrap();
                let c = a.concat_channels(v[2]).unwrap();
                probe_loss(t, c.normalize_channels(1e-3).unwrap())
            },
        );
    }

    #[test]
    fn gradcheck_log_softmax_pick() {
        let mut r = rng();
        check_op(vec![Tensor::randn(vec![3, 4], &mut r)], |_, v| {
            v[0].log_softmax().unwrap().pick(&[0, 3, 1]).unwrap().sum()
        });
    }

    #[test]
    fn pick_rejects_out_of_range_label() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros(vec![1, 2]));
        assert!(matches!(x.pick(&[2]), Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn backward_is_linear() {
        let mut r = rng();
        let x0 = Tensor::randn(vec![4], &mut r);
        let grad_of = |a: f64, b: f64| {
            let tape = Tape::new();
            let x = tape.var(x0.clone());
            let f = x.tanh().sum();
            let g = x.square().sum();
            let loss = f.scale(a).add(g.scale(b)).unwrap();
            tape.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let (a, b) = (0.7, -2.5);
        let combined = grad_of(a, b);
        let sep = grad_of(1.0, 0.0).axpby(a, &grad_of(0.0, 1.0), b).unwrap();
        for (u, v) in combined.data().iter().zip(sep.data()) {
            assert!((u - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.var(Tensor::scalar(1.0));
        let g = tape.backward(c.mul(x).unwrap()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn works_in_single_precision() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::scalar(3.0f32));
        let g = tape.backward(x.square()).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0f32);
    }
}
