//! Frozen-capable layers and the forward context that routes wrapped layers
//! through their adapters.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::affiner::{self, Adapter, AffinerParts};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::registry::AdapterSet;
use crate::tensor::{Scalar, Tensor};

/// What a linear map is applied over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// `y = W x + b` over the last axis.
    Dense,
    /// 3×3 same-padded convolution over NHWC input; `W` is `[m, 9·n]`.
    Conv3x3,
}

/// Coarse purpose of a layer, used to pick adapter targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerRole {
    Attention,
    Mlp,
    Modulation,
    Conv,
    Projection,
}

/// A linear (or convolutional) layer with weight `[m, n]` and bias `[m]`.
#[derive(Clone, Debug)]
pub struct LinearLayer<S: Scalar> {
    pub id: String,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub kind: LayerKind,
    pub role: LayerRole,
    pub frozen: bool,
}

impl<S: Scalar> LinearLayer<S> {
    pub fn dense(id: impl Into<String>, weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let (m, _) = weight.dims2()?;
        if bias.shape() != [m] {
            return shape_err("LinearLayer::dense", weight.shape(), bias.shape());
        }
        Ok(Self {
            id: id.into(),
            weight,
            bias,
            kind: LayerKind::Dense,
            role: LayerRole::Projection,
            frozen: false,
        })
    }

    pub fn conv3x3(id: impl Into<String>, weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let (m, k) = weight.dims2()?;
        if bias.shape() != [m] || k % 9 != 0 {
            return shape_err("LinearLayer::conv3x3", weight.shape(), bias.shape());
        }
        Ok(Self {
            id: id.into(),
            weight,
            bias,
            kind: LayerKind::Conv3x3,
            role: LayerRole::Conv,
            frozen: false,
        })
    }

    pub fn with_role(mut self, role: LayerRole) -> Self {
        self.role = role;
        self
    }

    /// Xavier-uniform weight, zero bias.
    pub fn xavier<R: Rng + ?Sized>(id: impl Into<String>, m: usize, n: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (m + n) as f64).sqrt();
        Self::dense(id, Tensor::uniform(vec![m, n], bound, rng), Tensor::zeros(vec![m])).expect("consistent shapes")
    }

    /// Zero weight and bias.
    pub fn zeros(id: impl Into<String>, m: usize, n: usize) -> Self {
        Self::dense(id, Tensor::zeros(vec![m, n]), Tensor::zeros(vec![m])).expect("consistent shapes")
    }

    /// Kaiming-normal 3×3 convolution with zero bias.
    pub fn conv_kaiming<R: Rng + ?Sized>(id: impl Into<String>, m: usize, n: usize, rng: &mut R) -> Self {
        Self::conv3x3(id, kaiming_normal(vec![m, 9 * n], 9 * n, rng), Tensor::zeros(vec![m])).expect("consistent shapes")
    }

    /// Output channels `m`.
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Input channels `n` (per pixel for convolutions).
    pub fn in_dim(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weight.shape()[1],
            LayerKind::Conv3x3 => self.weight.shape()[1] / 9,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.id)
    }

    /// `W x` without the bias.
    pub fn project<'t>(&self, weight: Var<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        match self.kind {
            LayerKind::Dense => channel_map(weight, x),
            LayerKind::Conv3x3 => x.conv3x3(weight),
        }
    }

    /// `y = W x + b̂`, without consulting any adapter.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let w = ctx.backbone_param(&self.weight_name(), &self.weight);
        let b = ctx.backbone_param(&self.bias_name(), &self.bias);
        self.project(w, x)?.add(b)
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&self.weight_name(), &mut self.weight);
        f(&self.bias_name(), &mut self.bias);
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&self.weight_name(), &self.weight);
        f(&self.bias_name(), &self.bias);
    }
}

/// Applies `w: [m, n]` over the last axis of `x: [..., n]`.
pub fn channel_map<'t, S: Scalar>(w: Var<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
    let xs = x.shape();
    let ws = w.shape();
    let n = *xs.last().unwrap_or(&1);
    if ws.len() != 2 || ws[1] != n {
        return shape_err("channel_map", &xs, &ws);
    }
    let rows = xs.iter().product::<usize>() / n;
    let y = x.reshape(vec![rows, n])?.matmul(w.transpose()?)?;
    let mut out = xs.clone();
    *out.last_mut().unwrap() = ws[0];
    y.reshape(out)
}

/// `N(0, 2 / fan_in)` entries: Kaiming-normal, fan-in mode, ReLU gain.
pub fn kaiming_normal<S: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<S> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Deterministic 64-bit seed derived from a base seed and a label (FNV-1a then splitmix64).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &byte in label.as_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Class embedding matrix laid out as `[W_1 .. W_N, W_uc, W_{N+2} .. W_{N+M+1}]`.
#[derive(Clone, Debug)]
pub struct EmbeddingTable<S: Scalar> {
    rows: Tensor<S>,
    n_base: usize,
    n_new: usize,
}

impl<S: Scalar> EmbeddingTable<S> {
    /// `rows` holds the `N` base classes followed by the unconditional row.
    pub fn new(rows: Tensor<S>, n_base: usize) -> Result<Self> {
        let (r, _) = rows.dims2()?;
        if r != n_base + 1 {
            return Err(Error::Invalid(format!(
                "embedding table has {r} rows, expected {} (N base classes + unconditional)",
                n_base + 1
            )));
        }
        Ok(Self { rows, n_base, n_new: 0 })
    }

    pub fn randn<R: Rng + ?Sized>(n_base: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Self::new(Tensor::randn(vec![n_base + 1, dim], std, rng), n_base).expect("consistent shape")
    }

    pub fn rows(&self) -> &Tensor<S> {
        &self.rows
    }

    pub(crate) fn rows_mut(&mut self) -> &mut Tensor<S> {
        &mut self.rows
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_new(&self) -> usize {
        self.n_new
    }

    pub fn uncond_index(&self) -> usize {
        self.n_base
    }

    pub fn len(&self) -> usize {
        self.n_base + 1 + self.n_new
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn lookup(&self, class_index: usize) -> Result<Tensor<S>> {
        if class_index >= self.len() {
            return Err(Error::IndexOutOfRange {
                what: "embedding rows",
                index: class_index,
                len: self.len(),
            });
        }
        self.rows.row(class_index)
    }

    /// Appends `m` rows, each a copy of the unconditional row.
    pub fn extend(&self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Invalid("embedding extension needs at least one new class".into()));
        }
        let mut data = self.rows.data().to_vec();
        let uc = self.rows.row(self.uncond_index())?;
        for _ in 0..m {
            data.extend_from_slice(uc.data());
        }
        Ok(Self {
            rows: Tensor::new(vec![self.len() + m, self.dim()], data)?,
            n_base: self.n_base,
            n_new: self.n_new + m,
        })
    }
}

/// One adapter-dispatch call observed during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchRecord {
    pub layer_id: String,
    pub input_shape: Vec<usize>,
}

/// Records every wrapped-layer evaluation; attach with [`Ctx::with_probe`].
#[derive(Debug, Default)]
pub struct DispatchProbe {
    calls: RefCell<Vec<DispatchRecord>>,
}

impl DispatchProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> Vec<DispatchRecord> {
        self.calls.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.calls.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.calls.borrow_mut().clear();
    }

    fn record(&self, layer_id: &str, input_shape: Vec<usize>) {
        self.calls.borrow_mut().push(DispatchRecord {
            layer_id: layer_id.to_string(),
            input_shape,
        });
    }
}

/// Which parameters a forward pass should expose to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Backbone,
    Adapters,
}

/// Origin of a bound parameter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ParamKey {
    Backbone(String),
    Adapter(String),
}

/// Per-forward state: the tape, the active adapter set, trainability and an optional probe.
pub struct Ctx<'t, 'a, S: Scalar> {
    tape: &'t Tape<S>,
    adapters: Option<&'a AdapterSet<S>>,
    trainable: Trainable,
    probe: Option<&'a DispatchProbe>,
    bound: RefCell<HashMap<ParamKey, Var<'t, S>>>,
    order: RefCell<Vec<ParamKey>>,
}

impl<'t, 'a, S: Scalar> Ctx<'t, 'a, S> {
    pub fn new(tape: &'t Tape<S>) -> Self {
        Self {
            tape,
            adapters: None,
            trainable: Trainable::Nothing,
            probe: None,
            bound: RefCell::new(HashMap::new()),
            order: RefCell::new(Vec::new()),
        }
    }

    pub fn with_adapters(mut self, adapters: Option<&'a AdapterSet<S>>) -> Self {
        self.adapters = adapters;
        self
    }

    pub fn training(mut self, trainable: Trainable) -> Self {
        self.trainable = trainable;
        self
    }

    pub fn with_probe(mut self, probe: &'a DispatchProbe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn adapters(&self) -> Option<&'a AdapterSet<S>> {
        self.adapters
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    fn bind(&self, key: ParamKey, value: &Tensor<S>, requires_grad: bool) -> Var<'t, S> {
        if let Some(v) = self.bound.borrow().get(&key) {
            return *v;
        }
        let v = self.tape.leaf(value.clone(), requires_grad);
        if requires_grad {
            self.order.borrow_mut().push(key.clone());
        }
        self.bound.borrow_mut().insert(key, v);
        v
    }

    /// Leaf for a backbone parameter; trainable only when the whole backbone is.
    pub fn backbone_param(&self, name: &str, value: &Tensor<S>) -> Var<'t, S> {
        self.bind(
            ParamKey::Backbone(name.to_string()),
            value,
            self.trainable == Trainable::Backbone,
        )
    }

    /// Leaf for an adapter parameter; `group_enabled` masks ablated groups.
    pub fn adapter_param(&self, name: &str, value: &Tensor<S>, group_enabled: bool) -> Var<'t, S> {
        self.bind(
            ParamKey::Adapter(name.to_string()),
            value,
            group_enabled && self.trainable == Trainable::Adapters,
        )
    }

    /// Trainable parameters bound so far, in binding order.
    pub fn bindings(&self) -> Vec<(ParamKey, Var<'t, S>)> {
        let bound = self.bound.borrow();
        self.order.borrow().iter().map(|k| (k.clone(), bound[k])).collect()
    }

    pub(crate) fn affiner_parts(&self) -> AffinerParts {
        self.adapters.map(|a| a.parts()).unwrap_or(AffinerParts::FULL)
    }

    /// The adapter dispatch point: every wrapped layer is evaluated through here.
    pub fn dispatch(&self, layer: &LinearLayer<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        if let Some(p) = self.probe {
            p.record(&layer.id, x.shape());
        }
        match self.adapters.and_then(|set| set.entry(&layer.id)) {
            None => layer.forward(self, x),
            Some(Adapter::Affiner(p)) => affiner::affiner_forward(self, layer, p, x),
            Some(Adapter::Lora(p)) => affiner::lora_forward(self, layer, p, x),
            Some(Adapter::BiasOnly(p)) => affiner::bias_only_forward(self, layer, p, x),
        }
    }
}

/// Pre-norm transformer block with adaLN-zero modulation.
///
/// Layer ids are `{prefix}.attn.{q,k,v,out}`, `{prefix}.mlp.{fc1,fc2}` and `{prefix}.adaln`.
#[derive(Clone, Debug)]
pub struct AttentionBlock<S: Scalar> {
    pub q: LinearLayer<S>,
    pub k: LinearLayer<S>,
    pub v: LinearLayer<S>,
    pub out: LinearLayer<S>,
    pub fc1: LinearLayer<S>,
    pub fc2: LinearLayer<S>,
    pub adaln: LinearLayer<S>,
    pub n_heads: usize,
    pub eps: f64,
}

impl<S: Scalar> AttentionBlock<S> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, hidden: usize, n_heads: usize, mlp_ratio: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || !hidden.is_multiple_of(n_heads) {
            return Err(Error::Invalid(format!("hidden {hidden} not divisible by {n_heads} heads")));
        }
        let mlp = hidden * mlp_ratio;
        let attn = |name: &str, rng: &mut R| {
            LinearLayer::xavier(format!("{prefix}.attn.{name}"), hidden, hidden, rng).with_role(LayerRole::Attention)
        };
        Ok(Self {
            q: attn("q", rng),
            k: attn("k", rng),
            v: attn("v", rng),
            out: attn("out", rng),
            fc1: LinearLayer::xavier(format!("{prefix}.mlp.fc1"), mlp, hidden, rng).with_role(LayerRole::Mlp),
            fc2: LinearLayer::xavier(format!("{prefix}.mlp.fc2"), hidden, mlp, rng).with_role(LayerRole::Mlp),
            // adaLN-zero: every shift, scale and gate starts at zero
            adaln: LinearLayer::zeros(format!("{prefix}.adaln"), 6 * hidden, hidden).with_role(LayerRole::Modulation),
            n_heads,
            eps: 1e-6,
        })
    }

    pub fn hidden(&self) -> usize {
        self.q.out_dim()
    }

    pub fn layers(&self) -> [&LinearLayer<S>; 7] {
        [&self.q, &self.k, &self.v, &self.out, &self.fc1, &self.fc2, &self.adaln]
    }

    pub fn layers_mut(&mut self) -> [&mut LinearLayer<S>; 7] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.out,
            &mut self.fc1,
            &mut self.fc2,
            &mut self.adaln,
        ]
    }

    /// `x: [B, T, d]`, `cond: [B, d]` -> `[B, T, d]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>, cond: Var<'t, S>) -> Result<Var<'t, S>> {
        let xs = x.shape();
        let d = self.hidden();
        if xs.len() != 3 || xs[2] != d || cond.shape() != [xs[0], d] {
            return shape_err("attention_forward", &xs, &cond.shape());
        }
        let t = xs[1];
        let m = ctx.dispatch(&self.adaln, cond.silu()?)?;
        let chunk = |i: usize| m.narrow(i * d, d);
        let (shift_a, scale_a, gate_a) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift_m, scale_m, gate_m) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let h = modulate(x.layernorm(None, None, self.eps)?, shift_a, scale_a, t)?;
        let attn = self.self_attention(ctx, h)?;
        let x = x.add(gate_a.repeat_axis1(t)?.mul(attn)?)?;

        let h = modulate(x.layernorm(None, None, self.eps)?, shift_m, scale_m, t)?;
        let mlp = ctx.dispatch(&self.fc2, ctx.dispatch(&self.fc1, h)?.gelu()?)?;
        x.add(gate_m.repeat_axis1(t)?.mul(mlp)?)
    }

    fn self_attention<'t>(&self, ctx: &Ctx<'t, '_, S>, h: Var<'t, S>) -> Result<Var<'t, S>> {
        let [b, t, d] = h.shape()[..] else { unreachable!() };
        let heads = self.n_heads;
        let dh = d / heads;
        let split = |v: Var<'t, S>| -> Result<Var<'t, S>> {
            v.reshape(vec![b, t, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![b * heads, t, dh])
        };
        let q = split(ctx.dispatch(&self.q, h)?)?;
        let k = split(ctx.dispatch(&self.k, h)?)?;
        let v = split(ctx.dispatch(&self.v, h)?)?;
        let scores = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt())?.softmax()?;
        let o = scores
            .matmul(v)?
            .reshape(vec![b, heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b, t, d])?;
        ctx.dispatch(&self.out, o)
    }
}

/// `x ⊙ (1 + scale) + shift`, with `[B, d]` modulation broadcast over `t` tokens.
pub fn modulate<'t, S: Scalar>(x: Var<'t, S>, shift: Var<'t, S>, scale: Var<'t, S>, t: usize) -> Result<Var<'t, S>> {
    x.mul(scale.add_scalar(1.0)?.repeat_axis1(t)?)?.add(shift.repeat_axis1(t)?)
}
