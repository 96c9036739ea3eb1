use std::cell::OnceCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Backbone, DenoiseInput, Fingerprint};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{channel_map, derive_seed, Ctx, EmbeddingTable, LayerRole, LinearLayer};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) enum Width {
    Base,
    Double,
    /// Upsampled deep features concatenated with the full-resolution skip.
    Merged,
}

impl Width {
    pub(crate) fn width(self, c0: usize, c1: usize) -> usize {
        match self {
            Width::Base => c0,
            Width::Double => c1,
            Width::Merged => c1 + c0,
        }
    }
}

/// Residual blocks in forward order: `(id, input width, output width)`.
pub(crate) const RES_BLOCKS: [(&str, Width, Width); 4] = [
    ("down0", Width::Base, Width::Base),
    ("down1", Width::Base, Width::Double),
    ("mid", Width::Double, Width::Double),
    ("up0", Width::Merged, Width::Base),
];

/// Conv residual block with per-channel affine conditioning.
#[derive(Clone, Debug)]
pub struct ResBlock<S: Scalar> {
    pub conv1: LinearLayer<S>,
    pub cond: LinearLayer<S>,
    pub conv2: LinearLayer<S>,
    pub skip: Option<LinearLayer<S>>,
}

impl<S: Scalar> ResBlock<S> {
    fn new(id: &str, cin: usize, cout: usize, emb: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
        Self {
            conv1: LinearLayer::conv_kaiming(format!("{id}.conv1"), cout, cin, &mut rng),
            cond: LinearLayer::zeros(format!("{id}.cond"), 2 * cout, emb).with_role(LayerRole::Modulation),
            conv2: LinearLayer::conv_kaiming(format!("{id}.conv2"), cout, cout, &mut rng),
            skip: (cin != cout).then(|| LinearLayer::xavier(format!("{id}.skip"), cout, cin, &mut rng)),
        }
    }

    fn layers(&self) -> Vec<&LinearLayer<S>> {
        let mut v = vec![&self.conv1, &self.cond, &self.conv2];
        v.extend(self.skip.as_ref());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LinearLayer<S>> {
        let mut v = vec![&mut self.conv1, &mut self.cond, &mut self.conv2];
        v.extend(self.skip.as_mut());
        v
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>, cvec: Var<'t, S>) -> Result<Var<'t, S>> {
        let [b, h, w, _] = x.shape()[..] else { unreachable!() };
        let cout = self.conv1.out_dim();
        let hmid = ctx.dispatch(&self.conv1, x.layernorm(None, None, 1e-5)?.silu()?)?;
        let m = ctx.dispatch(&self.cond, cvec.silu()?)?;
        let spread = |v: Var<'t, S>| v.repeat_axis1(h * w)?.reshape(vec![b, h, w, cout]);
        let scale = spread(m.narrow(0, cout)?.add_scalar(1.0)?)?;
        let shift = spread(m.narrow(cout, cout)?)?;
        let hmid = hmid.mul(scale)?.add(shift)?;
        let hout = ctx.dispatch(&self.conv2, hmid.layernorm(None, None, 1e-5)?.silu()?)?;
        let skip = match &self.skip {
            Some(l) => ctx.dispatch(l, x)?,
            None => x,
        };
        skip.add(hout)
    }
}

/// Two-level convolutional UNet over NHWC images.
#[derive(Clone, Debug)]
pub struct Cnn<S: Scalar> {
    pub config: ArchConfig,
    pub stem: LinearLayer<S>,
    pub time_fc1: LinearLayer<S>,
    pub time_fc2: LinearLayer<S>,
    pub class_table: EmbeddingTable<S>,
    pub blocks: Vec<ResBlock<S>>,
    pub head: LinearLayer<S>,
    pub(super) fingerprint: OnceCell<Fingerprint>,
}

impl<S: Scalar> Cnn<S> {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        let (c0, c1) = (config.hidden, 2 * config.hidden);
        let emb = config.hidden;
        let rng = |label: &str| ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
        let blocks = RES_BLOCKS
            .iter()
            .map(|&(id, i, o)| ResBlock::new(id, i.width(c0, c1), o.width(c0, c1), emb, seed))
            .collect();
        let normal = |id: &str, m: usize, n: usize, rng: &mut ChaCha8Rng| {
            LinearLayer::dense(id, Tensor::randn(vec![m, n], 0.02, rng), Tensor::zeros(vec![m])).expect("consistent shapes")
        };
        Ok(Self {
            config: config.clone(),
            stem: LinearLayer::conv_kaiming("stem", c0, config.channels, &mut rng("stem")),
            time_fc1: normal("t_embed.fc1", emb, config.freq_dim, &mut rng("t_embed.fc1")),
            time_fc2: normal("t_embed.fc2", emb, emb, &mut rng("t_embed.fc2")),
            class_table: EmbeddingTable::randn(config.classes, emb, 0.02, &mut rng("class_embed")),
            blocks,
            head: LinearLayer::conv3x3("head", Tensor::zeros(vec![config.channels, 9 * c0]), Tensor::zeros(vec![config.channels]))?,
            fingerprint: OnceCell::new(),
        })
    }

    pub(super) fn wrapped_layers(&self) -> Vec<&LinearLayer<S>> {
        self.blocks.iter().flat_map(|b| b.layers()).collect()
    }

    pub(super) fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for l in [&self.stem, &self.time_fc1, &self.time_fc2, &self.head] {
            l.visit(f);
        }
        f("class_embed", self.class_table.rows());
        for b in &self.blocks {
            for l in b.layers() {
                l.visit(f);
            }
        }
    }

    pub(super) fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for l in [&mut self.stem, &mut self.time_fc1, &mut self.time_fc2, &mut self.head] {
            l.visit_mut(f);
        }
        f("class_embed", self.class_table.rows_mut());
        for b in &mut self.blocks {
            for l in b.layers_mut() {
                l.visit_mut(f);
            }
        }
    }

    pub(super) fn forward<'t>(&self, ctx: &Ctx<'t, '_, S>, input: DenoiseInput<'_, 't, S>) -> Result<Var<'t, S>> {
        let c = &self.config;
        let cvec = Backbone::conditioning(
            ctx,
            &self.time_fc1,
            &self.time_fc2,
            &self.class_table,
            c.freq_dim,
            input.t,
            input.classes,
        )?;
        let mut h = self.stem.forward(ctx, input.x)?;
        if let (Some(cond), Some(inj)) = (input.cond, ctx.adapters().and_then(|a| a.cond.as_ref())) {
            let (c0, k) = inj.proj.dims2()?;
            if cond.shape()[3] != k || c0 != c.hidden {
                return Err(Error::Shape {
                    op: "inject_condition",
                    lhs: h.shape(),
                    rhs: cond.shape(),
                });
            }
            let gate = ctx.adapter_param("cond::gate", &inj.gate, true);
            let proj = ctx.adapter_param("cond::proj", &inj.proj, true);
            h = h.add(channel_map(proj, cond)?.mul(gate)?)?;
        }
        let [down0, down1, mid, up0] = &self.blocks[..] else { unreachable!() };
        let skip = down0.forward(ctx, h, cvec)?;
        let deep = down1.forward(ctx, skip.avg_pool2()?, cvec)?;
        let deep = mid.forward(ctx, deep, cvec)?;
        let merged = deep.upsample2()?.concat(skip, 3)?;
        let out = up0.forward(ctx, merged, cvec)?;
        self.head.forward(ctx, out.layernorm(None, None, 1e-5)?.silu()?)
    }
}
