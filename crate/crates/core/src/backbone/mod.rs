//! Toy denoisers: a DiT-style transformer and a small convolutional UNet.

mod arch;
mod cnn;
mod dit;

use std::cell::OnceCell;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::affiner::{LayerShape, ParamCountModel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, EmbeddingTable, LinearLayer};
use crate::registry::AdapterSet;
use crate::tensor::{Scalar, Tensor};

pub use arch::{ArchConfig, ArchKind};
pub use cnn::Cnn;
pub use dit::Dit;

/// SHA-256 over the frozen weights of a backbone.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hashes named arrays in name order: name, dtype tag, shape, little-endian data.
pub fn fingerprint_arrays<'a, S: Scalar>(arrays: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>) -> Fingerprint {
    let mut items: Vec<_> = arrays.into_iter().collect();
    items.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update([S::DTYPE.tag()]);
        h.update((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(t.le_bytes());
    }
    Fingerprint(h.finalize().into())
}

/// Tokens kept by a training-time mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    pub tokens: usize,
    /// Sorted, distinct.
    pub kept: Vec<usize>,
    pub seed: u64,
}

/// Keeps `max(1, round((1 - ratio) · tokens))` tokens chosen uniformly at random.
pub fn make_mask(tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if tokens == 0 {
        return Err(Error::Invalid("mask over zero tokens".into()));
    }
    let keep = (((1.0 - ratio) * tokens as f64).round() as usize).clamp(1, tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = sample(&mut rng, tokens, keep).into_vec();
    kept.sort_unstable();
    Ok(MaskPlan {
        ratio,
        tokens,
        kept,
        seed,
    })
}

/// Sinusoidal timestep features `[B, dim]`: cosines then sines, max period 10⁴.
pub fn timestep_features<S: Scalar>(t: &[usize], dim: usize) -> Result<Tensor<S>> {
    if t.is_empty() || dim < 2 {
        return Err(Error::Invalid("timestep features need a batch and dim >= 2".into()));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let row_start = data.len();
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(S::from_f64((ti as f64 * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(S::from_f64((ti as f64 * freq).sin()));
        }
        data.resize(row_start + dim, S::zero());
    }
    Tensor::new(vec![t.len(), dim], data)
}

/// Fixed 2D sin-cos positional table `[gh·gw, dim]`; first half encodes rows, second half columns.
pub fn positional_table<S: Scalar>(gh: usize, gw: usize, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let quarter = half / 2;
    let encode = |pos: usize, out: &mut Vec<S>, width: usize| {
        let start = out.len();
        for i in 0..quarter {
            let omega = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
            out.push(S::from_f64((pos as f64 * omega).sin()));
        }
        for i in 0..quarter {
            let omega = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
            out.push(S::from_f64((pos as f64 * omega).cos()));
        }
        out.resize(start + width, S::zero());
    };
    let mut data = Vec::with_capacity(gh * gw * dim);
    for y in 0..gh {
        for x in 0..gw {
            encode(y, &mut data, half);
            encode(x, &mut data, dim - half);
        }
    }
    Tensor::new(vec![gh * gw, dim], data).expect("consistent shape")
}

/// A frozen denoiser.
#[derive(Clone, Debug)]
pub enum Backbone<S: Scalar> {
    Dit(Dit<S>),
    Cnn(Cnn<S>),
}

/// Per-item inputs of one denoiser evaluation.
#[derive(Clone, Copy)]
pub struct DenoiseInput<'a, 't, S: Scalar> {
    /// Noisy images `[B, H, W, C]`.
    pub x: Var<'t, S>,
    pub t: &'a [usize],
    pub classes: &'a [usize],
    /// Condition maps `[B, H, W, C_cond]`.
    pub cond: Option<Var<'t, S>>,
    pub mask: Option<&'a MaskPlan>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            ArchKind::Dit => Backbone::Dit(Dit::new(config, seed)?),
            ArchKind::Cnn => Backbone::Cnn(Cnn::new(config, seed)?),
        })
    }

    pub fn config(&self) -> &ArchConfig {
        match self {
            Backbone::Dit(m) => &m.config,
            Backbone::Cnn(m) => &m.config,
        }
    }

    pub fn class_table(&self) -> &EmbeddingTable<S> {
        match self {
            Backbone::Dit(m) => &m.class_table,
            Backbone::Cnn(m) => &m.class_table,
        }
    }

    fn fingerprint_cell(&self) -> &OnceCell<Fingerprint> {
        match self {
            Backbone::Dit(m) => &m.fingerprint,
            Backbone::Cnn(m) => &m.fingerprint,
        }
    }

    /// Layers that adapters may wrap, in forward order.
    pub fn wrapped_layers(&self) -> Vec<&LinearLayer<S>> {
        match self {
            Backbone::Dit(m) => m.wrapped_layers(),
            Backbone::Cnn(m) => m.wrapped_layers(),
        }
    }

    pub fn wrapped_layer(&self, id: &str) -> Option<&LinearLayer<S>> {
        self.wrapped_layers().into_iter().find(|l| l.id == id)
    }

    /// Every named parameter array, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        match self {
            Backbone::Dit(m) => m.visit(f),
            Backbone::Cnn(m) => m.visit(f),
        }
    }

    /// Mutable access to every parameter; invalidates the cached fingerprint.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        match self {
            Backbone::Dit(m) => {
                m.fingerprint.take();
                m.visit_mut(f)
            }
            Backbone::Cnn(m) => {
                m.fingerprint.take();
                m.visit_mut(f)
            }
        }
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn fingerprint(&self) -> Fingerprint {
        *self.fingerprint_cell().get_or_init(|| {
            let arrays = self.named_arrays();
            fingerprint_arrays(arrays.iter().map(|(n, t)| (n.as_str(), t)))
        })
    }

    /// Shapes of the wrapped layers as built.
    pub fn count_model(&self) -> ParamCountModel {
        ParamCountModel {
            layers: self
                .wrapped_layers()
                .into_iter()
                .map(|l| LayerShape {
                    id: l.id.clone(),
                    m: l.out_dim(),
                    n: l.in_dim(),
                    role: l.role,
                })
                .collect(),
            backbone_total: self.param_count(),
        }
    }

    /// Token count of the transformer; `None` for the CNN.
    pub fn tokens(&self) -> Option<usize> {
        match self {
            Backbone::Dit(m) => Some(m.config.tokens()),
            Backbone::Cnn(_) => None,
        }
    }

    /// Denoiser on the tape: predicts `ε` with the shape of `input.x`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, S>, input: DenoiseInput<'_, 't, S>) -> Result<Var<'t, S>> {
        let c = self.config();
        let xs = input.x.shape();
        let b = xs.first().copied().unwrap_or(0);
        if xs != [b, c.height, c.width, c.channels] || input.t.len() != b || input.classes.len() != b {
            return Err(Error::Shape {
                op: "denoise_forward",
                lhs: xs,
                rhs: vec![input.t.len(), c.height, c.width, c.channels],
            });
        }
        if let Some(cond) = input.cond {
            let cs = cond.shape();
            if cs.len() != 4 || cs[..3] != xs[..3] {
                return Err(Error::Shape {
                    op: "inject_condition",
                    lhs: xs,
                    rhs: cs,
                });
            }
        }
        if let Some(set) = ctx.adapters() {
            set.check_binding(self)?;
        }
        match self {
            Backbone::Dit(m) => m.forward(ctx, input),
            Backbone::Cnn(m) => {
                if input.mask.is_some() {
                    return Err(Error::Invalid("token masking is only defined for the transformer".into()));
                }
                m.forward(ctx, input)
            }
        }
    }

    /// Plain evaluation without gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise(
        &self,
        x: &Tensor<S>,
        t: &[usize],
        classes: &[usize],
        cond: Option<&Tensor<S>>,
        adapters: Option<&AdapterSet<S>>,
        mask: Option<&MaskPlan>,
    ) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape).with_adapters(adapters);
        let input = DenoiseInput {
            x: tape.constant(x.clone()),
            t,
            classes,
            cond: cond.map(|c| tape.constant(c.clone())),
            mask,
        };
        let out = self.forward(&ctx, input)?;
        Ok((*out.value()).clone())
    }

    /// Conditioning vectors `time_embed(t) + class_row`, `[B, hidden]`.
    pub(crate) fn conditioning<'t>(
        ctx: &Ctx<'t, '_, S>,
        time_fc1: &LinearLayer<S>,
        time_fc2: &LinearLayer<S>,
        table: &EmbeddingTable<S>,
        freq_dim: usize,
        t: &[usize],
        classes: &[usize],
    ) -> Result<Var<'t, S>> {
        let tape = ctx.tape();
        let feats = tape.constant(timestep_features(t, freq_dim)?);
        let temb = time_fc2.forward(ctx, time_fc1.forward(ctx, feats)?.silu()?)?;
        let mut rows = ctx.backbone_param("class_embed", table.rows());
        if let Some(extra) = ctx.adapters().and_then(|a| a.new_class_rows.as_ref()) {
            let extra = ctx.adapter_param("new_class_rows", extra, true);
            rows = rows.concat(extra, 0)?;
        }
        let n_rows = rows.shape()[0];
        if let Some(&bad) = classes.iter().find(|&&c| c >= n_rows) {
            return Err(Error::IndexOutOfRange {
                what: "class embedding rows",
                index: bad,
                len: n_rows,
            });
        }
        temb.add(rows.gather_rows(classes)?)
    }
}

/// `[B, H, W, C] -> [B, T, p²C]`.
pub fn patchify<'t, S: Scalar>(x: Var<'t, S>, p: usize) -> Result<Var<'t, S>> {
    let [b, h, w, c] = x.shape()[..] else {
        return Err(Error::Invalid("patchify expects [B, H, W, C]".into()));
    };
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![h, w],
            rhs: vec![p, p],
        });
    }
    let (gh, gw) = (h / p, w / p);
    x.reshape(vec![b, gh, p, gw, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![b, gh * gw, p * p * c])
}

/// Inverse of [`patchify`].
pub fn unpatchify<'t, S: Scalar>(tokens: Var<'t, S>, p: usize, h: usize, w: usize, c: usize) -> Result<Var<'t, S>> {
    let b = tokens.shape()[0];
    let (gh, gw) = (h / p, w / p);
    tokens
        .reshape(vec![b, gh, gw, p, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![b, h, w, c])
}

#[cfg(test)]
mod tests;
