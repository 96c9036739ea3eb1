use std::collections::HashMap;

use rand::Rng;

use super::{Adam, Schedule};
use crate::autodiff::{Grads, Tape, Var};
use crate::backbone::{make_mask, patchify, Backbone, DenoiseInput, MaskPlan};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamKey, Trainable};
use crate::registry::AdapterSet;
use crate::tensor::{Scalar, Tensor};

/// Clean training examples.
#[derive(Debug, Clone)]
pub struct Batch<S: Scalar> {
    /// `[B, H, W, C]`.
    pub x0: Tensor<S>,
    pub classes: Vec<usize>,
    /// `[B, H, W, C_cond]`.
    pub cond: Option<Tensor<S>>,
}

/// Timesteps and noise for one step.
#[derive(Debug, Clone)]
pub struct StepNoise<S: Scalar> {
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
}

/// Uniform timesteps and standard normal noise shaped like `x0`.
pub fn draw_noise<S: Scalar, R: Rng + ?Sized>(x0: &Tensor<S>, schedule: &Schedule, rng: &mut R) -> StepNoise<S> {
    let b = x0.shape()[0];
    let t = (0..b).map(|_| rng.random_range(0..schedule.len())).collect();
    StepNoise {
        t,
        eps: Tensor::randn(x0.shape().to_vec(), 1.0, rng),
    }
}

/// Mean squared error between `ε̂` and `ε`, restricted to the kept tokens when masked.
pub fn denoising_loss<'t, S: Scalar>(
    eps_hat: Var<'t, S>,
    eps: Var<'t, S>,
    mask: Option<&MaskPlan>,
    patch: usize,
) -> Result<Var<'t, S>> {
    let diff = eps_hat.sub(eps)?;
    let diff = match mask {
        Some(plan) => patchify(diff, patch)?.select_tokens(&plan.kept)?,
        None => diff,
    };
    diff.mul(diff)?.mean()
}

fn forward_loss<'t, S: Scalar>(
    ctx: &Ctx<'t, '_, S>,
    backbone: &Backbone<S>,
    batch: &Batch<S>,
    schedule: &Schedule,
    noise: &StepNoise<S>,
    mask: Option<&MaskPlan>,
) -> Result<Var<'t, S>> {
    let tape = ctx.tape();
    let x_t = schedule.q_sample(&batch.x0, &noise.t, &noise.eps)?;
    let input = DenoiseInput {
        x: tape.constant(x_t),
        t: &noise.t,
        classes: &batch.classes,
        cond: batch.cond.as_ref().map(|c| tape.constant(c.clone())),
        mask,
    };
    let eps_hat = backbone.forward(ctx, input)?;
    denoising_loss(eps_hat, tape.constant(noise.eps.clone()), mask, backbone.config().patch)
}

fn check_loss(loss: f64, opt: &Adam) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step: opt.steps() as usize + 1,
            loss,
        })
    }
}

fn collect<S: Scalar>(ctx: &Ctx<'_, '_, S>, grads: &mut Grads<S>) -> Vec<(ParamKey, Tensor<S>)> {
    ctx.bindings()
        .into_iter()
        .filter_map(|(k, v)| grads.take_id(v.id()).map(|g| (k, g)))
        .collect()
}

fn by_name<S: Scalar>(
    updates: Vec<(ParamKey, Tensor<S>)>,
    pick: impl Fn(ParamKey) -> Option<String>,
) -> HashMap<String, Tensor<S>> {
    updates.into_iter().filter_map(|(k, g)| pick(k).map(|n| (n, g))).collect()
}

/// Loss of the current adapter set on a batch, without updating anything.
pub fn eval_loss<S: Scalar>(
    backbone: &Backbone<S>,
    set: Option<&AdapterSet<S>>,
    batch: &Batch<S>,
    schedule: &Schedule,
    noise: &StepNoise<S>,
    mask: Option<&MaskPlan>,
) -> Result<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape).with_adapters(set);
    Ok(forward_loss(&ctx, backbone, batch, schedule, noise, mask)?.value().item().as_f64())
}

/// One Adam step on the adapter parameters only; the backbone is borrowed immutably.
///
/// Draws timesteps, noise and (when `mask_ratio > 0`) a token mask from `rng`.
pub fn train_step_adapters<S: Scalar, R: Rng + ?Sized>(
    backbone: &Backbone<S>,
    set: &mut AdapterSet<S>,
    batch: &Batch<S>,
    schedule: &Schedule,
    mask_ratio: f64,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<f64> {
    let noise = draw_noise(&batch.x0, schedule, rng);
    let mask = match (mask_ratio > 0.0, backbone.tokens()) {
        (true, Some(tokens)) => Some(make_mask(tokens, mask_ratio, rng.random())?),
        (true, None) => return Err(Error::Invalid("token masking needs a transformer backbone".into())),
        (false, _) => None,
    };
    adapter_step_with(backbone, set, batch, schedule, &noise, mask.as_ref(), opt)
}

/// Adapter step with caller-supplied noise and mask.
pub fn adapter_step_with<S: Scalar>(
    backbone: &Backbone<S>,
    set: &mut AdapterSet<S>,
    batch: &Batch<S>,
    schedule: &Schedule,
    noise: &StepNoise<S>,
    mask: Option<&MaskPlan>,
    opt: &mut Adam,
) -> Result<f64> {
    let (loss, updates) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape).with_adapters(Some(&*set)).training(Trainable::Adapters);
        let loss = forward_loss(&ctx, backbone, batch, schedule, noise, mask)?;
        let value = loss.value().item().as_f64();
        check_loss(value, opt)?;
        let mut grads = tape.backward(loss)?;
        (value, collect(&ctx, &mut grads))
    };
    opt.begin_step();
    let mut by_name = by_name(updates, |k| match k {
        ParamKey::Adapter(n) => Some(n),
        ParamKey::Backbone(_) => None,
    });
    let mut result = Ok(());
    set.visit_mut(&mut |name, t| {
        if let Some(g) = by_name.remove(name) {
            if result.is_ok() {
                result = opt.update(name, t, &g);
            }
        }
    });
    result?;
    Ok(loss)
}

/// One Adam step on every backbone parameter (pretraining).
pub fn train_step_backbone<S: Scalar, R: Rng + ?Sized>(
    backbone: &mut Backbone<S>,
    batch: &Batch<S>,
    schedule: &Schedule,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<f64> {
    let noise = draw_noise(&batch.x0, schedule, rng);
    let (loss, updates) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape).training(Trainable::Backbone);
        let loss = forward_loss(&ctx, backbone, batch, schedule, &noise, None)?;
        let value = loss.value().item().as_f64();
        check_loss(value, opt)?;
        let mut grads = tape.backward(loss)?;
        (value, collect(&ctx, &mut grads))
    };
    opt.begin_step();
    let mut by_name = by_name(updates, |k| match k {
        ParamKey::Backbone(n) => Some(n),
        ParamKey::Adapter(_) => None,
    });
    let mut result = Ok(());
    backbone.visit_mut(&mut |name, t| {
        if let Some(g) = by_name.remove(name) {
            if result.is_ok() {
                result = opt.update(name, t, &g);
            }
        }
    });
    result?;
    Ok(loss)
}
