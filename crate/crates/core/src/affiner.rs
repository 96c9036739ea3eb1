//! The Affiner adapter and the LoRA / bias-only baselines.
//!
//! An Affiner wraps a frozen linear layer `y = W x + b̂` as
//!
//! ```text
//! y = (1 + a) ⊙ (W x) + s · W_up · ReLU(W_down · x) + b̂ + b
//! ```
//!
//! with `a`, `b` per output channel, a scalar gate `s`, and a rank-`d` branch.
//! `a`, `b` and `s` start at zero so a fresh adapter reproduces the frozen
//! layer bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{channel_map, kaiming_normal, Ctx, LayerKind, LayerRole, LinearLayer};
use crate::tensor::{Scalar, Tensor};

/// Per-layer Affiner parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinerParams<S: Scalar> {
    /// Multiplicative residual scale, `[m]`.
    pub a: Tensor<S>,
    /// Additive shift, `[m]`.
    pub b: Tensor<S>,
    /// Branch gate, rank 0.
    pub s: Tensor<S>,
    /// `[d, n]`.
    pub w_down: Tensor<S>,
    /// `[m, d]`.
    pub w_up: Tensor<S>,
}

impl<S: Scalar> AffinerParams<S> {
    /// Zero `a`, `b`, `s`; Kaiming-normal `W_down` and `W_up`, seeded deterministically.
    pub fn init(m: usize, n: usize, d_rank: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 || d_rank == 0 {
            return Err(Error::Invalid(format!("affiner dims must be positive, got m={m} n={n} d={d_rank}")));
        }
        if d_rank > m.min(n) {
            log::warn!("affiner rank {d_rank} exceeds min(m, n) = {}; the branch is redundant", m.min(n));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_down = kaiming_normal(vec![d_rank, n], n, &mut rng);
        let w_up = kaiming_normal(vec![m, d_rank], d_rank, &mut rng);
        Ok(Self {
            a: Tensor::zeros(vec![m]),
            b: Tensor::zeros(vec![m]),
            s: Tensor::scalar(S::zero()),
            w_down,
            w_up,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.a.numel()
    }

    pub fn in_dim(&self) -> usize {
        self.w_down.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn gate(&self) -> S {
        self.s.item()
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel() + self.s.numel() + self.w_down.numel() + self.w_up.numel()
    }

    /// `(role name, array)` pairs in a fixed order.
    pub fn arrays(&self) -> [(&'static str, &Tensor<S>); 5] {
        [
            ("a", &self.a),
            ("b", &self.b),
            ("s", &self.s),
            ("w_down", &self.w_down),
            ("w_up", &self.w_up),
        ]
    }

    pub fn arrays_mut(&mut self) -> [(&'static str, &mut Tensor<S>); 5] {
        [
            ("a", &mut self.a),
            ("b", &mut self.b),
            ("s", &mut self.s),
            ("w_down", &mut self.w_down),
            ("w_up", &mut self.w_up),
        ]
    }

    fn check(&self, layer: &LinearLayer<S>) -> Result<()> {
        let (m, n) = (layer.out_dim(), layer.in_dim());
        let d = self.rank();
        let ok = self.a.shape() == [m]
            && self.b.shape() == [m]
            && self.s.numel() == 1
            && self.w_down.shape() == [d, n]
            && self.w_up.shape() == [m, d];
        if ok {
            Ok(())
        } else {
            shape_err("affiner_forward", &[m, n], &[self.a.numel(), self.in_dim()])
        }
    }
}

/// Which Affiner parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffinerParts {
    pub scale: bool,
    pub shift: bool,
    pub branch: bool,
}

impl AffinerParts {
    pub const FULL: Self = Self {
        scale: true,
        shift: true,
        branch: true,
    };
    pub const SHIFT_ONLY: Self = Self {
        scale: false,
        shift: true,
        branch: false,
    };
    pub const SCALE_ONLY: Self = Self {
        scale: true,
        shift: false,
        branch: false,
    };
    pub const BRANCH_ONLY: Self = Self {
        scale: false,
        shift: false,
        branch: true,
    };

    /// Variant names accepted by configuration files.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::FULL),
            "b-only" | "shift-only" => Some(Self::SHIFT_ONLY),
            "a-only" | "scale-only" => Some(Self::SCALE_ONLY),
            "branch-only" => Some(Self::BRANCH_ONLY),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match (self.scale, self.shift, self.branch) {
            (true, true, true) => "full",
            (false, true, false) => "b-only",
            (true, false, false) => "a-only",
            (false, false, true) => "branch-only",
            _ => "custom",
        }
    }

    pub fn bits(self) -> u8 {
        self.scale as u8 | (self.shift as u8) << 1 | (self.branch as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Self {
        Self {
            scale: bits & 1 != 0,
            shift: bits & 2 != 0,
            branch: bits & 4 != 0,
        }
    }
}

/// Low-rank update `A (B x)`; `B` starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams<S: Scalar> {
    /// `[m, r]`.
    pub a: Tensor<S>,
    /// `[r, n]`.
    pub b: Tensor<S>,
}

impl<S: Scalar> LoraParams<S> {
    pub fn init(m: usize, n: usize, rank: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 || rank == 0 {
            return Err(Error::Invalid(format!("lora dims must be positive, got m={m} n={n} r={rank}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            a: kaiming_normal(vec![m, rank], rank, &mut rng),
            b: Tensor::zeros(vec![rank, n]),
        })
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[0]
    }
}

/// Additive bias offset `δb`, zero at creation.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasParams<S: Scalar> {
    pub delta: Tensor<S>,
}

impl<S: Scalar> BiasParams<S> {
    pub fn init(m: usize) -> Self {
        Self {
            delta: Tensor::zeros(vec![m]),
        }
    }
}

/// Adapter attached to one wrapped layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter<S: Scalar> {
    Affiner(AffinerParams<S>),
    Lora(LoraParams<S>),
    BiasOnly(BiasParams<S>),
}

impl<S: Scalar> Adapter<S> {
    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|(_, t)| t.numel()).sum()
    }

    /// `(role name, array)` pairs in a fixed order.
    pub fn arrays(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            Adapter::Affiner(p) => p.arrays().to_vec(),
            Adapter::Lora(p) => vec![("lora_a", &p.a), ("lora_b", &p.b)],
            Adapter::BiasOnly(p) => vec![("delta_b", &p.delta)],
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        match self {
            Adapter::Affiner(p) => p.arrays_mut().into_iter().collect(),
            Adapter::Lora(p) => vec![("lora_a", &mut p.a), ("lora_b", &mut p.b)],
            Adapter::BiasOnly(p) => vec![("delta_b", &mut p.delta)],
        }
    }
}

/// How a wrapped layer is adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Affiner { rank: usize },
    Lora { rank: usize },
    BiasOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Affiner { .. } => "affiner",
            Method::Lora { .. } => "lora",
            Method::BiasOnly => "bias-only",
        }
    }

    /// Whether a layer with this role receives an adapter under this method.
    /// LoRA targets attention projections when the backbone has any, otherwise every wrapped layer.
    pub fn targets(self, role: LayerRole, backbone_has_attention: bool) -> bool {
        match self {
            Method::Lora { .. } if backbone_has_attention => role == LayerRole::Attention,
            _ => true,
        }
    }

    pub fn create<S: Scalar>(self, m: usize, n: usize, seed: u64) -> Result<Adapter<S>> {
        Ok(match self {
            Method::Affiner { rank } => Adapter::Affiner(AffinerParams::init(m, n, rank, seed)?),
            Method::Lora { rank } => Adapter::Lora(LoraParams::init(m, n, rank, seed)?),
            Method::BiasOnly => Adapter::BiasOnly(BiasParams::init(m)),
        })
    }
}

/// Affiner parameters already bound on a tape.
#[derive(Clone, Copy)]
pub struct AffinerVars<'t, S: Scalar> {
    pub a: Var<'t, S>,
    pub b: Var<'t, S>,
    pub s: Var<'t, S>,
    pub w_down: Var<'t, S>,
    pub w_up: Var<'t, S>,
}

/// Evaluates the Affiner expression on bound variables.
///
/// `skip_branch` omits the branch term; callers only set it when the gate is
/// exactly zero and frozen.
pub fn affiner_apply<'t, S: Scalar>(
    kind: LayerKind,
    weight: Var<'t, S>,
    bias: Var<'t, S>,
    p: AffinerVars<'t, S>,
    x: Var<'t, S>,
    skip_branch: bool,
) -> Result<Var<'t, S>> {
    let wx = match kind {
        LayerKind::Dense => channel_map(weight, x)?,
        LayerKind::Conv3x3 => x.conv3x3(weight)?,
    };
    let mut y = wx.mul(p.a.add_scalar(1.0)?)?;
    if !skip_branch {
        let branch = channel_map(p.w_up, channel_map(p.w_down, x)?.relu()?)?;
        y = y.add(branch.mul(p.s)?)?;
    }
    y.add(bias)?.add(p.b)
}

fn param_name(layer_id: &str, role: &str) -> String {
    format!("{layer_id}::{role}")
}

fn name_layer(layer_id: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{op} in layer `{layer_id}`")),
        other => other,
    }
}

/// Affiner-wrapped forward of `layer`, binding the adapter through `ctx`.
pub fn affiner_forward<'t, S: Scalar>(
    ctx: &Ctx<'t, '_, S>,
    layer: &LinearLayer<S>,
    p: &AffinerParams<S>,
    x: Var<'t, S>,
) -> Result<Var<'t, S>> {
    p.check(layer)?;
    let parts = ctx.affiner_parts();
    let id = &layer.id;
    let vars = AffinerVars {
        a: ctx.adapter_param(&param_name(id, "a"), &p.a, parts.scale),
        b: ctx.adapter_param(&param_name(id, "b"), &p.b, parts.shift),
        s: ctx.adapter_param(&param_name(id, "s"), &p.s, parts.branch),
        w_down: ctx.adapter_param(&param_name(id, "w_down"), &p.w_down, parts.branch),
        w_up: ctx.adapter_param(&param_name(id, "w_up"), &p.w_up, parts.branch),
    };
    let skip_branch = p.gate() == S::zero() && !vars.s.requires_grad();
    let w = ctx.backbone_param(&layer.weight_name(), &layer.weight);
    let bias = ctx.backbone_param(&layer.bias_name(), &layer.bias);
    affiner_apply(layer.kind, w, bias, vars, x, skip_branch).map_err(|e| name_layer(id, e))
}

/// `y = W x + b̂ + A (B x)`; the low-rank path is a 1×1 map on convolutions.
pub fn lora_forward<'t, S: Scalar>(
    ctx: &Ctx<'t, '_, S>,
    layer: &LinearLayer<S>,
    p: &LoraParams<S>,
    x: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (m, n) = (layer.out_dim(), layer.in_dim());
    let r = p.rank();
    if p.a.shape() != [m, r] || p.b.shape() != [r, n] {
        return shape_err("lora_forward", &[m, n], p.a.shape());
    }
    let a = ctx.adapter_param(&param_name(&layer.id, "lora_a"), &p.a, true);
    let b = ctx.adapter_param(&param_name(&layer.id, "lora_b"), &p.b, true);
    let w = ctx.backbone_param(&layer.weight_name(), &layer.weight);
    let bias = ctx.backbone_param(&layer.bias_name(), &layer.bias);
    let lowrank = channel_map(a, channel_map(b, x)?)?;
    layer
        .project(w, x)?
        .add(bias)?
        .add(lowrank)
        .map_err(|e| name_layer(&layer.id, e))
}

/// `y = W x + b̂ + δb`.
pub fn bias_only_forward<'t, S: Scalar>(
    ctx: &Ctx<'t, '_, S>,
    layer: &LinearLayer<S>,
    p: &BiasParams<S>,
    x: Var<'t, S>,
) -> Result<Var<'t, S>> {
    if p.delta.shape() != [layer.out_dim()] {
        return shape_err("bias_only_forward", &[layer.out_dim()], p.delta.shape());
    }
    let delta = ctx.adapter_param(&param_name(&layer.id, "delta_b"), &p.delta, true);
    layer.forward(ctx, x)?.add(delta).map_err(|e| name_layer(&layer.id, e))
}

/// Affine part of an Affiner merged into the frozen weights; the gated branch stays separate.
#[derive(Clone, Debug)]
pub struct FoldedAffiner<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub kind: LayerKind,
    pub gate: S,
    pub w_down: Tensor<S>,
    pub w_up: Tensor<S>,
}

/// `W_folded = diag(1 + a) W`, `b_folded = b̂ + b`.
pub fn fold_affine<S: Scalar>(layer: &LinearLayer<S>, p: &AffinerParams<S>) -> Result<FoldedAffiner<S>> {
    p.check(layer)?;
    let (m, k) = layer.weight.dims2()?;
    let mut w = layer.weight.data().to_vec();
    for i in 0..m {
        let f = S::one() + p.a.data()[i];
        for v in &mut w[i * k..(i + 1) * k] {
            *v *= f;
        }
    }
    let bias = layer.bias.data().iter().zip(p.b.data()).map(|(&x, &y)| x + y).collect();
    Ok(FoldedAffiner {
        weight: Tensor::new(vec![m, k], w)?,
        bias: Tensor::new(vec![m], bias)?,
        kind: layer.kind,
        gate: p.gate(),
        w_down: p.w_down.clone(),
        w_up: p.w_up.clone(),
    })
}

impl<S: Scalar> FoldedAffiner<S> {
    /// `W_folded x + b_folded`, the branch left out.
    pub fn forward_folded<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let w = tape.constant(self.weight.clone());
        let wx = match self.kind {
            LayerKind::Dense => channel_map(w, x)?,
            LayerKind::Conv3x3 => x.conv3x3(w)?,
        };
        wx.add(tape.constant(self.bias.clone()))
    }

    /// Folded forward plus the gated branch.
    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let folded = self.forward_folded(tape, x)?;
        let down = channel_map(tape.constant(self.w_down.clone()), x)?.relu()?;
        let branch = channel_map(tape.constant(self.w_up.clone()), down)?;
        folded.add(branch.scale(self.gate.as_f64())?)
    }
}

/// Shape record of one wrapped layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub id: String,
    pub m: usize,
    pub n: usize,
    pub role: LayerRole,
}

/// Wrapped-layer shapes of a backbone plus its frozen parameter total.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamCountModel {
    pub layers: Vec<LayerShape>,
    pub backbone_total: usize,
}

/// What [`count_params`] counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMethod {
    /// Affiner with the given parameter groups; rank 0 counts the affine part only.
    Affiner { rank: usize, parts: AffinerParts },
    Lora { rank: usize },
    BiasOnly,
}

impl From<Method> for CountMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Affiner { rank } => CountMethod::Affiner {
                rank,
                parts: AffinerParts::FULL,
            },
            Method::Lora { rank } => CountMethod::Lora { rank },
            Method::BiasOnly => CountMethod::BiasOnly,
        }
    }
}

impl ParamCountModel {
    pub fn has_attention(&self) -> bool {
        self.layers.iter().any(|l| l.role == LayerRole::Attention)
    }

    /// Per-layer count; zero for layers the method does not target.
    pub fn layer_count(&self, layer: &LayerShape, method: CountMethod) -> usize {
        let (m, n) = (layer.m, layer.n);
        match method {
            CountMethod::Affiner { rank, parts } => {
                let mut c = 0;
                if parts.scale {
                    c += m;
                }
                if parts.shift {
                    c += m;
                }
                if parts.branch {
                    c += 1 + rank * (m + n);
                }
                c
            }
            CountMethod::Lora { rank } => {
                if (Method::Lora { rank }).targets(layer.role, self.has_attention()) {
                    rank * (m + n)
                } else {
                    0
                }
            }
            CountMethod::BiasOnly => m,
        }
    }
}

/// Closed-form adapter parameter total over the wrapped layers.
pub fn count_params(model: &ParamCountModel, method: CountMethod) -> usize {
    model.layers.iter().map(|l| model.layer_count(l, method)).sum()
}

/// Adapter share of the parameters, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableFraction {
    /// `100 · adapter / (backbone + adapter)`.
    pub of_total: f64,
    /// `100 · adapter / backbone`.
    pub of_backbone: f64,
}

pub fn trainable_fraction(backbone_total: usize, adapter_total: usize) -> Result<TrainableFraction> {
    if backbone_total == 0 {
        return Err(Error::Invalid("backbone parameter total must be positive".into()));
    }
    let (bb, ad) = (backbone_total as f64, adapter_total as f64);
    Ok(TrainableFraction {
        of_total: 100.0 * ad / (bb + ad),
        of_backbone: 100.0 * ad / bb,
    })
}

#[cfg(test)]
mod tests;
