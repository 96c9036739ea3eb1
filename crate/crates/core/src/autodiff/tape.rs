use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which operand of a binary op was broadcast over leading axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Rhs,
    Lhs,
}

enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize, Bcast),
    Scale(usize, S),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Silu(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: Option<usize>,
        bias: Option<usize>,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    RepeatAxis1(usize, usize),
    Narrow {
        a: usize,
        start: usize,
    },
    Concat {
        a: usize,
        b: usize,
        outer: usize,
        chunk_a: usize,
        chunk_b: usize,
    },
    Gather(usize, Vec<usize>),
    Select1(usize, Vec<usize>),
    Scatter1 {
        base: usize,
        src: usize,
        idx: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    Conv3x3 {
        x: usize,
        w: usize,
        cols: Vec<S>,
    },
    AvgPool2(usize),
    Upsample2(usize),
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b, _) => vec![a, b],
            Op::MatMul { a, b, .. } | Op::Concat { a, b, .. } => vec![a, b],
            Op::Scatter1 { base, src, .. } => vec![base, src],
            Op::Conv3x3 { x, w, .. } => vec![x, w],
            Op::LayerNorm { x, gain, bias, .. } => {
                let mut v = vec![x];
                v.extend(gain);
                v.extend(bias);
                v
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Silu(a)
            | Op::TransposeLast2(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Softmax(a)
            | Op::RepeatAxis1(a, _)
            | Op::Narrow { a, .. }
            | Op::Gather(a, _)
            | Op::Select1(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::AvgPool2(a)
            | Op::Upsample2(a) => vec![a],
        }
    }
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

/// Records a computation for a single reverse-mode pass.
///
/// A tape is built by one forward evaluation and consumed by one call to
/// [`Tape::backward`]; a second call fails with [`Error::GraphConsumed`].
pub struct Tape<S: Scalar> {
    inner: RefCell<Inner<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take_id(&mut self, id: usize) -> Option<Tensor<S>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

fn trimmed(shape: &[usize]) -> &[usize] {
    let lead = shape.iter().take_while(|&&d| d == 1).count();
    &shape[lead..]
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    let small = trimmed(small);
    big.len() >= small.len() && &big[big.len() - small.len()..] == small
}

fn binary_forward<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<(Tensor<S>, Bcast)> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((Tensor::new(a.shape(), data)?, Bcast::Same));
    }
    if is_suffix(a.shape(), b.shape()) {
        let bd = b.data();
        let nb = bd.len();
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        return Ok((Tensor::new(a.shape(), data)?, Bcast::Rhs));
    }
    if is_suffix(b.shape(), a.shape()) {
        let ad = a.data();
        let na = ad.len();
        let data = b.data().iter().enumerate().map(|(i, &y)| f(ad[i % na], y)).collect();
        return Ok((Tensor::new(b.shape(), data)?, Bcast::Lhs));
    }
    shape_err(op, a.shape(), b.shape())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<S>> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn push(&self, name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var<'_, S>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| inner.nodes[i].requires_grad);
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` gets an entry in the result, zero-filled
    /// when the loss does not depend on it.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Grads<S>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_shape));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let contribs = backward_rule(nodes, id, &g)?;
            for (input, contrib) in contribs {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    slot @ None => *slot = Some(contrib),
                    Some(acc) => acc.add_assign(&contrib)?,
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads { grads })
    }
}

fn val<S: Scalar>(nodes: &[Node<S>], id: usize) -> &Tensor<S> {
    &nodes[id].value
}

fn needs<S: Scalar>(nodes: &[Node<S>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn like<S: Scalar>(t: &Tensor<S>, data: Vec<S>) -> Result<Tensor<S>> {
    Tensor::new(t.shape(), data)
}

/// Gradient of a broadcast binary op with respect to one operand.
fn unbroadcast<S: Scalar>(operand: &Tensor<S>, full: Vec<S>) -> Result<Tensor<S>> {
    if full.len() == operand.numel() {
        like(operand, full)
    } else {
        like(operand, kernels::reduce_leading(&full, operand.numel()))
    }
}

fn bcast_index(i: usize, n: usize) -> usize {
    i % n
}

fn backward_rule<S: Scalar>(nodes: &[Node<S>], id: usize, g: &Tensor<S>) -> Result<Vec<(usize, Tensor<S>)>> {
    let out = val(nodes, id);
    let gd = g.data();
    let mut res = Vec::new();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let neg = matches!(nodes[id].op, Op::Sub(..));
            if needs(nodes, a) {
                res.push((a, unbroadcast(val(nodes, a), gd.to_vec())?));
            }
            if needs(nodes, b) {
                let gb: Vec<S> = if neg { gd.iter().map(|&v| -v).collect() } else { gd.to_vec() };
                res.push((b, unbroadcast(val(nodes, b), gb)?));
            }
        }
        &Op::Mul(a, b, mode) => {
            let (av, bv) = (val(nodes, a), val(nodes, b));
            let (ad, bd) = (av.data(), bv.data());
            let (na, nb) = (ad.len(), bd.len());
            let pick = |i: usize, src: &[S], n: usize, is_small: bool| {
                if is_small {
                    src[bcast_index(i, n)]
                } else {
                    src[i]
                }
            };
            if needs(nodes, a) {
                let full: Vec<S> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * pick(i, bd, nb, mode == Bcast::Rhs))
                    .collect();
                res.push((a, unbroadcast(av, full)?));
            }
            if needs(nodes, b) {
                let full: Vec<S> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * pick(i, ad, na, mode == Bcast::Lhs))
                    .collect();
                res.push((b, unbroadcast(bv, full)?));
            }
        }
        &Op::Scale(a, c) => res.push((a, g.map(|v| v * c))),
        &Op::AddScalar(a) => res.push((a, g.clone())),
        &Op::Relu(a) => {
            let x = val(nodes, a);
            let data = gd
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                .collect();
            res.push((a, like(x, data)?));
        }
        &Op::Gelu(a) => {
            let x = val(nodes, a);
            let data = gd
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| gv * S::from_f64(kernels::gelu_tanh_grad(xv.as_f64())))
                .collect();
            res.push((a, like(x, data)?));
        }
        &Op::Silu(a) => {
            let x = val(nodes, a);
            let data = gd
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| {
                    let xf = xv.as_f64();
                    let s = kernels::sigmoid(xf);
                    gv * S::from_f64(s * (1.0 + xf * (1.0 - s)))
                })
                .collect();
            res.push((a, like(x, data)?));
        }
        &Op::MatMul { a, b, batch, m, k, n } => {
            let (av, bv) = (val(nodes, a), val(nodes, b));
            if needs(nodes, a) {
                let mut da = Vec::with_capacity(batch * m * k);
                for bi in 0..batch {
                    let bt = kernels::transpose(&bv.data()[bi * k * n..(bi + 1) * k * n], k, n);
                    da.extend(kernels::gemm(&gd[bi * m * n..(bi + 1) * m * n], &bt, m, n, k));
                }
                res.push((a, like(av, da)?));
            }
            if needs(nodes, b) {
                let mut db = Vec::with_capacity(batch * k * n);
                for bi in 0..batch {
                    let at = kernels::transpose(&av.data()[bi * m * k..(bi + 1) * m * k], m, k);
                    db.extend(kernels::gemm(&at, &gd[bi * m * n..(bi + 1) * m * n], k, m, n));
                }
                res.push((b, like(bv, db)?));
            }
        }
        &Op::TransposeLast2(a) => {
            let x = val(nodes, a);
            res.push((a, transpose_last2(g)?.reshape(x.shape())?));
        }
        &Op::Reshape(a) => res.push((a, g.reshape(val(nodes, a).shape())?)),
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (data, shape) = kernels::permute(gd, g.shape(), &inv);
            res.push((*a, Tensor::new(shape, data)?));
        }
        &Op::Softmax(a) => {
            let d = out.last_dim();
            let mut dx = Vec::with_capacity(gd.len());
            for (grow, yrow) in gd.chunks_exact(d).zip(out.data().chunks_exact(d)) {
                let mut dot = S::zero();
                for (&gv, &yv) in grow.iter().zip(yrow) {
                    dot += gv * yv;
                }
                dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
            }
            res.push((a, like(out, dx)?));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = out.last_dim();
            let dn = S::from_f64(d as f64);
            let gain_v = gain.map(|gi| val(nodes, gi).data().to_vec());
            if needs(nodes, *x) {
                let mut dx = Vec::with_capacity(gd.len());
                let mut dxhat = vec![S::zero(); d];
                for (r, (grow, hrow)) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = match &gain_v {
                            Some(gv) => grow[j] * gv[j],
                            None => grow[j],
                        };
                    }
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hrow[j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        dx.push(rstd[r] * (dxhat[j] - m1 - hrow[j] * m2));
                    }
                }
                res.push((*x, like(val(nodes, *x), dx)?));
            }
            if let Some(gi) = *gain {
                if needs(nodes, gi) {
                    let prod: Vec<S> = gd.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                    res.push((gi, like(val(nodes, gi), kernels::reduce_leading(&prod, d))?));
                }
            }
            if let Some(bi) = *bias {
                if needs(nodes, bi) {
                    res.push((bi, like(val(nodes, bi), kernels::reduce_leading(gd, d))?));
                }
            }
        }
        &Op::RepeatAxis1(a, t) => {
            let x = val(nodes, a);
            let d = x.last_dim();
            let b = x.numel() / d;
            let mut dx = vec![S::zero(); x.numel()];
            for bi in 0..b {
                for ti in 0..t {
                    let src = &gd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for (o, &v) in dx[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            res.push((a, like(x, dx)?));
        }
        &Op::Narrow { a, start } => {
            let x = val(nodes, a);
            let d = x.last_dim();
            let len = g.last_dim();
            let mut dx = vec![S::zero(); x.numel()];
            for (r, grow) in gd.chunks_exact(len).enumerate() {
                dx[r * d + start..r * d + start + len].copy_from_slice(grow);
            }
            res.push((a, like(x, dx)?));
        }
        &Op::Concat {
            a,
            b,
            outer,
            chunk_a,
            chunk_b,
        } => {
            let mut da = Vec::with_capacity(outer * chunk_a);
            let mut db = Vec::with_capacity(outer * chunk_b);
            for o in 0..outer {
                let base = o * (chunk_a + chunk_b);
                da.extend_from_slice(&gd[base..base + chunk_a]);
                db.extend_from_slice(&gd[base + chunk_a..base + chunk_a + chunk_b]);
            }
            if needs(nodes, a) {
                res.push((a, like(val(nodes, a), da)?));
            }
            if needs(nodes, b) {
                res.push((b, like(val(nodes, b), db)?));
            }
        }
        Op::Gather(table, idx) => {
            let t = val(nodes, *table);
            let d = t.last_dim();
            let mut dt = vec![S::zero(); t.numel()];
            for (r, &row) in idx.iter().enumerate() {
                for j in 0..d {
                    dt[row * d + j] += gd[r * d + j];
                }
            }
            res.push((*table, like(t, dt)?));
        }
        Op::Select1(a, idx) => {
            let x = val(nodes, *a);
            let (b, t, d) = dims3(x.shape());
            let k = idx.len();
            let mut dx = vec![S::zero(); x.numel()];
            for bi in 0..b {
                for (ki, &ti) in idx.iter().enumerate() {
                    let dst = (bi * t + ti) * d;
                    let src = (bi * k + ki) * d;
                    for j in 0..d {
                        dx[dst + j] += gd[src + j];
                    }
                }
            }
            res.push((*a, like(x, dx)?));
        }
        Op::Scatter1 { base, src, idx } => {
            let (b, t, d) = dims3(g.shape());
            let k = idx.len();
            if needs(nodes, *base) {
                let mut db = gd.to_vec();
                for bi in 0..b {
                    for &ti in idx {
                        db[(bi * t + ti) * d..(bi * t + ti + 1) * d].fill(S::zero());
                    }
                }
                res.push((*base, like(val(nodes, *base), db)?));
            }
            if needs(nodes, *src) {
                let mut ds = Vec::with_capacity(b * k * d);
                for bi in 0..b {
                    for &ti in idx {
                        ds.extend_from_slice(&gd[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
                    }
                }
                res.push((*src, like(val(nodes, *src), ds)?));
            }
        }
        &Op::Sum(a) => {
            let x = val(nodes, a);
            res.push((a, Tensor::full(x.shape(), gd[0])));
        }
        &Op::Mean(a) => {
            let x = val(nodes, a);
            res.push((a, Tensor::full(x.shape(), gd[0] / S::from_f64(x.numel() as f64))));
        }
        Op::Conv3x3 { x, w, cols } => {
            let (xv, wv) = (val(nodes, *x), val(nodes, *w));
            let (b, h, wd, c) = dims4(xv.shape());
            let co = wv.shape()[0];
            let rows = b * h * wd;
            if needs(nodes, *w) {
                let gt = kernels::transpose(gd, rows, co);
                res.push((*w, like(wv, kernels::gemm(&gt, cols, co, rows, 9 * c))?));
            }
            if needs(nodes, *x) {
                let dcols = kernels::gemm(gd, wv.data(), rows, co, 9 * c);
                res.push((*x, like(xv, kernels::col2im3(&dcols, b, h, wd, c))?));
            }
        }
        &Op::AvgPool2(a) => {
            let x = val(nodes, a);
            let (b, h, w, c) = dims4(x.shape());
            let quarter = S::from_f64(0.25);
            let mut dx = vec![S::zero(); x.numel()];
            for bi in 0..b {
                for y in 0..h {
                    for xi in 0..w {
                        let src = ((bi * (h / 2) + y / 2) * (w / 2) + xi / 2) * c;
                        let dst = ((bi * h + y) * w + xi) * c;
                        for ch in 0..c {
                            dx[dst + ch] = gd[src + ch] * quarter;
                        }
                    }
                }
            }
            res.push((a, like(x, dx)?));
        }
        &Op::Upsample2(a) => {
            let x = val(nodes, a);
            let (b, h, w, c) = dims4(x.shape());
            let mut dx = vec![S::zero(); x.numel()];
            for bi in 0..b {
                for y in 0..2 * h {
                    for xi in 0..2 * w {
                        let src = ((bi * 2 * h + y) * 2 * w + xi) * c;
                        let dst = ((bi * h + y / 2) * w + xi / 2) * c;
                        for ch in 0..c {
                            dx[dst + ch] += gd[src + ch];
                        }
                    }
                }
            }
            res.push((a, like(x, dx)?));
        }
    }
    Ok(res)
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn transpose_last2<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let r = t.rank();
    if r < 2 {
        return shape_err("transpose", t.shape(), &[0, 0]);
    }
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = t.numel() / (m * n);
    let mut data = Vec::with_capacity(t.numel());
    for bi in 0..batch {
        data.extend(kernels::transpose(&t.data()[bi * m * n..(bi + 1) * m * n], m, n));
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, data)
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn backward(self) -> Result<Grads<S>> {
        self.tape.backward(self)
    }

    fn unary(self, name: &'static str, f: impl Fn(S) -> S, op: Op<S>) -> Result<Self> {
        let x = self.value();
        self.tape.push(name, x.map(f), op)
    }

    /// Elementwise sum; the smaller operand may be broadcast over leading axes.
    pub fn add(self, rhs: Self) -> Result<Self> {
        let (out, _) = binary_forward("add", &self.value(), &rhs.value(), |a, b| a + b)?;
        self.tape.push("add", out, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        let (out, _) = binary_forward("sub", &self.value(), &rhs.value(), |a, b| a - b)?;
        self.tape.push("sub", out, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Self) -> Result<Self> {
        let (out, mode) = binary_forward("mul", &self.value(), &rhs.value(), |a, b| a * b)?;
        self.tape.push("mul", out, Op::Mul(self.id, rhs.id, mode))
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        let c = S::from_f64(c);
        self.unary("scale", |v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        let c = S::from_f64(c);
        self.unary("add_scalar", |v| v + c, Op::AddScalar(self.id))
    }

    /// `max(x, 0)`; the gradient at exactly zero is zero.
    pub fn relu(self) -> Result<Self> {
        self.unary("relu", |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Self> {
        self.unary(
            "gelu",
            |v| S::from_f64(kernels::gelu_tanh(v.as_f64())),
            Op::Gelu(self.id),
        )
    }

    pub fn silu(self) -> Result<Self> {
        self.unary(
            "silu",
            |v| {
                let x = v.as_f64();
                S::from_f64(x * kernels::sigmoid(x))
            },
            Op::Silu(self.id),
        )
    }

    /// Matrix product of two rank-2 tensors, or a batched product of two rank-3 tensors.
    pub fn matmul(self, rhs: Self) -> Result<Self> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        let (batch, m, k, n, out_shape) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n, vec![*ba, *m, *n]),
            _ => return shape_err("matmul", sa, sb),
        };
        let mut data = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            data.extend(kernels::gemm(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let out = Tensor::new(out_shape, data)?;
        self.tape.push(
            "matmul",
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Self> {
        let out = transpose_last2(&self.value())?;
        self.tape.push("transpose", out, Op::TransposeLast2(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", x.shape(), perm);
        }
        let (data, shape) = kernels::permute(x.data(), x.shape(), perm);
        self.tape.push("permute", Tensor::new(shape, data)?, Op::Permute(self.id, perm.to_vec()))
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(self) -> Result<Self> {
        let x = self.value();
        let d = x.last_dim();
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(d) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = data.len();
            let mut total = S::zero();
            for &v in row {
                let e = (v - mx).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        self.tape.push("softmax", Tensor::new(x.shape(), data)?, Op::Softmax(self.id))
    }

    /// Layer normalization over the last axis, with optional elementwise gain and bias.
    pub fn layernorm(self, gain: Option<Self>, bias: Option<Self>, eps: f64) -> Result<Self> {
        let x = self.value();
        let d = x.last_dim();
        for p in gain.iter().chain(bias.iter()) {
            if p.shape() != [d] {
                return shape_err("layernorm", x.shape(), &p.shape());
            }
        }
        let gv = gain.map(|g| g.value());
        let bv = bias.map(|b| b.value());
        let dn = S::from_f64(d as f64);
        let eps = S::from_f64(eps);
        let rows = x.numel() / d;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(d) {
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean /= dn;
            let mut var = S::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= dn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                let mut y = match &gv {
                    Some(g) => h * g.data()[j],
                    None => h,
                };
                if let Some(b) = &bv {
                    y += b.data()[j];
                }
                data.push(y);
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        self.tape.push(
            "layernorm",
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.map(|g| g.id),
                bias: bias.map(|b| b.id),
                xhat,
                rstd,
            },
        )
    }

    /// `[B, D] -> [B, T, D]` by repeating each row `t` times.
    pub fn repeat_axis1(self, t: usize) -> Result<Self> {
        let x = self.value();
        let [b, d] = x.shape()[..] else {
            return shape_err("repeat_axis1", x.shape(), &[0, 0]);
        };
        let mut data = Vec::with_capacity(b * t * d);
        for row in x.data().chunks_exact(d) {
            for _ in 0..t {
                data.extend_from_slice(row);
            }
        }
        self.tape.push("repeat_axis1", Tensor::new(vec![b, t, d], data)?, Op::RepeatAxis1(self.id, t))
    }

    /// Slice `start..start+len` of the last axis.
    pub fn narrow(self, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let d = x.last_dim();
        if len == 0 || start + len > d {
            return shape_err("narrow", x.shape(), &[start, len]);
        }
        let mut data = Vec::with_capacity(x.numel() / d * len);
        for row in x.data().chunks_exact(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.tape.push("narrow", Tensor::new(shape, data)?, Op::Narrow { a: self.id, start })
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(self, rhs: Self, axis: usize) -> Result<Self> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return shape_err("concat", sa, sb);
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (chunk_a, chunk_b) = (sa[axis] * inner, sb[axis] * inner);
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for o in 0..outer {
            data.extend_from_slice(&a.data()[o * chunk_a..(o + 1) * chunk_a]);
            data.extend_from_slice(&b.data()[o * chunk_b..(o + 1) * chunk_b]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        self.tape.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                a: self.id,
                b: rhs.id,
                outer,
                chunk_a,
                chunk_b,
            },
        )
    }

    /// Rows of a `[R, D]` table.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Self> {
        let t = self.value();
        let (r, d) = t.dims2()?;
        if idx.is_empty() {
            return Err(Error::Invalid("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    what: "table rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        self.tape.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), d], data)?,
            Op::Gather(self.id, idx.to_vec()),
        )
    }

    /// `[B, T, D] -> [B, k, D]`, keeping token positions `idx`.
    pub fn select_tokens(self, idx: &[usize]) -> Result<Self> {
        let x = self.value();
        let [b, t, d] = x.shape()[..] else {
            return shape_err("select_tokens", x.shape(), &[0, 0, 0]);
        };
        check_token_idx(idx, t)?;
        let mut data = Vec::with_capacity(b * idx.len() * d);
        for bi in 0..b {
            for &ti in idx {
                data.extend_from_slice(&x.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
            }
        }
        self.tape.push(
            "select_tokens",
            Tensor::new(vec![b, idx.len(), d], data)?,
            Op::Select1(self.id, idx.to_vec()),
        )
    }

    /// Copy of `self: [B, T, D]` with token positions `idx` replaced by `src: [B, k, D]`.
    pub fn scatter_tokens(self, src: Self, idx: &[usize]) -> Result<Self> {
        let (base, sv) = (self.value(), src.value());
        let [b, t, d] = base.shape()[..] else {
            return shape_err("scatter_tokens", base.shape(), sv.shape());
        };
        if sv.shape() != [b, idx.len(), d] {
            return shape_err("scatter_tokens", base.shape(), sv.shape());
        }
        check_token_idx(idx, t)?;
        let mut data = base.data().to_vec();
        for bi in 0..b {
            for (ki, &ti) in idx.iter().enumerate() {
                data[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                    .copy_from_slice(&sv.data()[(bi * idx.len() + ki) * d..(bi * idx.len() + ki + 1) * d]);
            }
        }
        self.tape.push(
            "scatter_tokens",
            Tensor::new(base.shape(), data)?,
            Op::Scatter1 {
                base: self.id,
                src: src.id,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn sum(self) -> Result<Self> {
        let s = self.value().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let s = self.value().mean();
        self.tape.push("mean", Tensor::scalar(s), Op::Mean(self.id))
    }

    /// 3×3, stride 1, zero-padded convolution.
    ///
    /// `self: [B, H, W, Cin]` (channels last), `weight: [Cout, 9·Cin]` laid out as
    /// `(ky, kx, cin)` along the second axis.
    pub fn conv3x3(self, weight: Self) -> Result<Self> {
        let (x, w) = (self.value(), weight.value());
        let (&[b, h, wd, c], &[co, kc]) = (x.shape(), w.shape()) else {
            return shape_err("conv3x3", x.shape(), w.shape());
        };
        if kc != 9 * c {
            return shape_err("conv3x3", x.shape(), w.shape());
        }
        let cols = kernels::im2col3(x.data(), b, h, wd, c);
        let wt = kernels::transpose(w.data(), co, kc);
        let data = kernels::gemm(&cols, &wt, b * h * wd, kc, co);
        self.tape.push(
            "conv3x3",
            Tensor::new(vec![b, h, wd, co], data)?,
            Op::Conv3x3 {
                x: self.id,
                w: weight.id,
                cols,
            },
        )
    }

    /// 2×2 average pooling over NHWC input with even spatial size.
    pub fn avg_pool2(self) -> Result<Self> {
        let x = self.value();
        let [b, h, w, c] = x.shape()[..] else {
            return shape_err("avg_pool2", x.shape(), &[0, 0, 0, 0]);
        };
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("avg_pool2", x.shape(), &[2, 2]);
        }
        let quarter = S::from_f64(0.25);
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut data = Vec::with_capacity(x.numel() / 4);
        for bi in 0..b {
            for y in 0..ho {
                for xi in 0..wo {
                    for ch in 0..c {
                        let at = |dy: usize, dx: usize| xd[((bi * h + 2 * y + dy) * w + 2 * xi + dx) * c + ch];
                        data.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter);
                    }
                }
            }
        }
        self.tape.push("avg_pool2", Tensor::new(vec![b, ho, wo, c], data)?, Op::AvgPool2(self.id))
    }

    /// Nearest-neighbour 2× upsampling over NHWC input.
    pub fn upsample2(self) -> Result<Self> {
        let x = self.value();
        let [b, h, w, c] = x.shape()[..] else {
            return shape_err("upsample2", x.shape(), &[0, 0, 0, 0]);
        };
        let xd = x.data();
        let mut data = Vec::with_capacity(x.numel() * 4);
        for bi in 0..b {
            for y in 0..2 * h {
                for xi in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xi / 2) * c;
                    data.extend_from_slice(&xd[src..src + c]);
                }
            }
        }
        self.tape.push("upsample2", Tensor::new(vec![b, 2 * h, 2 * w, c], data)?, Op::Upsample2(self.id))
    }
}

fn check_token_idx(idx: &[usize], t: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Invalid("empty token selection".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
        return Err(Error::IndexOutOfRange {
            what: "tokens",
            index: bad,
            len: t,
        });
    }
    Ok(())
}
