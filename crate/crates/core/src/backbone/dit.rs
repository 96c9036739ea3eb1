use std::cell::OnceCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{patchify, positional_table, unpatchify, ArchConfig, Backbone, DenoiseInput, Fingerprint};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{derive_seed, modulate, AttentionBlock, Ctx, EmbeddingTable, LinearLayer};
use crate::registry::CondInjection;
use crate::tensor::{Scalar, Tensor};

/// DiT-style denoiser over patch tokens.
#[derive(Clone, Debug)]
pub struct Dit<S: Scalar> {
    pub config: ArchConfig,
    pub patch_embed: LinearLayer<S>,
    pub time_fc1: LinearLayer<S>,
    pub time_fc2: LinearLayer<S>,
    pub class_table: EmbeddingTable<S>,
    pub blocks: Vec<AttentionBlock<S>>,
    pub final_adaln: LinearLayer<S>,
    pub final_linear: LinearLayer<S>,
    pos: Tensor<S>,
    pub(super) fingerprint: OnceCell<Fingerprint>,
}

impl<S: Scalar> Dit<S> {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        let h = config.hidden;
        let p2c = config.patch * config.patch * config.channels;
        let rng = |label: &str| ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
        let blocks = (0..config.depth)
            .map(|i| {
                let prefix = format!("blocks.{i}");
                AttentionBlock::new(&prefix, h, config.heads, config.mlp_ratio, &mut rng(&prefix))
            })
            .collect::<Result<Vec<_>>>()?;
        let (gh, gw) = (config.height / config.patch, config.width / config.patch);
        Ok(Self {
            config: config.clone(),
            patch_embed: LinearLayer::xavier("patch_embed", h, p2c, &mut rng("patch_embed")),
            time_fc1: normal_linear("t_embed.fc1", h, config.freq_dim, &mut rng("t_embed.fc1")),
            time_fc2: normal_linear("t_embed.fc2", h, h, &mut rng("t_embed.fc2")),
            class_table: EmbeddingTable::randn(config.classes, h, 0.02, &mut rng("class_embed")),
            blocks,
            final_adaln: LinearLayer::zeros("final.adaln", 2 * h, h),
            final_linear: LinearLayer::zeros("final.linear", p2c, h),
            pos: positional_table(gh, gw, h),
            fingerprint: OnceCell::new(),
        })
    }

    pub(super) fn wrapped_layers(&self) -> Vec<&LinearLayer<S>> {
        self.blocks.iter().flat_map(|b| b.layers()).collect()
    }

    fn frozen_layers(&self) -> [&LinearLayer<S>; 5] {
        [
            &self.patch_embed,
            &self.time_fc1,
            &self.time_fc2,
            &self.final_adaln,
            &self.final_linear,
        ]
    }

    pub(super) fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for l in self.frozen_layers() {
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
        for l in [
            &mut self.patch_embed,
            &mut self.time_fc1,
            &mut self.time_fc2,
            &mut self.final_adaln,
            &mut self.final_linear,
        ] {
            l.visit_mut(f);
        }
        f("class_embed", self.class_table.rows_mut());
        for b in &mut self.blocks {
            for l in b.layers_mut() {
                l.visit_mut(f);
            }
        }
    }

    /// Patch embedding plus positions, and the zero-gated condition injection when present.
    pub fn embed_tokens<'t>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>, cond: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        let p = self.config.patch;
        let tokens = self.patch_embed.forward(ctx, patchify(x, p)?)?;
        let mut tokens = tokens.add(ctx.tape().constant(self.pos.clone()))?;
        if let (Some(cond), Some(inj)) = (cond, ctx.adapters().and_then(|a| a.cond.as_ref())) {
            tokens = inject_condition(ctx, tokens, patchify(cond, p)?, inj)?;
        }
        Ok(tokens)
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
        let tokens = self.embed_tokens(ctx, input.x, input.cond)?;
        let hidden = match input.mask {
            None => self.run_blocks(ctx, tokens, cvec)?,
            Some(plan) => {
                if plan.tokens != c.tokens() {
                    return Err(Error::Invalid(format!(
                        "mask built for {} tokens, backbone has {}",
                        plan.tokens,
                        c.tokens()
                    )));
                }
                let kept = self.run_blocks(ctx, tokens.select_tokens(&plan.kept)?, cvec)?;
                tokens.scatter_tokens(kept, &plan.kept)?
            }
        };
        let out = self.final_layer(ctx, hidden, cvec)?;
        unpatchify(out, c.patch, c.height, c.width, c.channels)
    }

    pub fn run_blocks<'t>(&self, ctx: &Ctx<'t, '_, S>, mut x: Var<'t, S>, cvec: Var<'t, S>) -> Result<Var<'t, S>> {
        for block in &self.blocks {
            x = block.forward(ctx, x, cvec)?;
        }
        Ok(x)
    }

    fn final_layer<'t>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>, cvec: Var<'t, S>) -> Result<Var<'t, S>> {
        let h = self.config.hidden;
        let t = x.shape()[1];
        let m = self.final_adaln.forward(ctx, cvec.silu()?)?;
        let (shift, scale) = (m.narrow(0, h)?, m.narrow(h, h)?);
        let x = modulate(x.layernorm(None, None, 1e-6)?, shift, scale, t)?;
        self.final_linear.forward(ctx, x)
    }
}

fn normal_linear<S: Scalar, R: rand::Rng>(id: &str, m: usize, n: usize, rng: &mut R) -> LinearLayer<S> {
    LinearLayer::dense(id, Tensor::randn(vec![m, n], 0.02, rng), Tensor::zeros(vec![m])).expect("consistent shapes")
}

/// `tokens + g · proj(cond_tokens)` with the gate and projection owned by the adapter set.
pub fn inject_condition<'t, S: Scalar>(
    ctx: &Ctx<'t, '_, S>,
    tokens: Var<'t, S>,
    cond_tokens: Var<'t, S>,
    inj: &CondInjection<S>,
) -> Result<Var<'t, S>> {
    let (ts, cs) = (tokens.shape(), cond_tokens.shape());
    let (hd, k) = inj.proj.dims2()?;
    if ts.len() != 3 || cs.len() != 3 || ts[..2] != cs[..2] || ts[2] != hd || cs[2] != k {
        return Err(Error::Shape {
            op: "inject_condition",
            lhs: ts,
            rhs: cs,
        });
    }
    let gate = ctx.adapter_param("cond::gate", &inj.gate, true);
    let proj = ctx.adapter_param("cond::proj", &inj.proj, true);
    tokens.add(crate::nn::channel_map(proj, cond_tokens)?.mul(gate)?)
}
