//! Training and sampling loops shared by the CLI and the acceptance suite.

use affiner::backbone::{ArchConfig, Backbone};
use affiner::diffusion::{sample, train_step_adapters, train_step_backbone, Adam, Batch, SamplerConfig, Schedule};
use affiner::nn::derive_seed;
use affiner::registry::AdapterSet;
use affiner::{Result, Scalar, Tensor};
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{points_of, ImageSet, Mixture};

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl OptimSpec {
    pub fn adam(&self) -> Adam {
        Adam::new(self.lr).with_betas(self.beta1, self.beta2)
    }
}

/// Budget of one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub steps: usize,
    /// Point sets per batch.
    pub batch: usize,
    pub optim: OptimSpec,
    pub seed: u64,
}

/// Loss after every step.
pub type LossCurve = Vec<f64>;

/// Where training batches come from.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    /// Point sets, all labelled with the unconditional row.
    Points(&'a Mixture),
    Images {
        set: &'a ImageSet,
        /// Pass the coarse silhouette as the condition map.
        paired: bool,
        /// Label of the first family; later families follow in order.
        /// `None` labels each image by its family index.
        first_label: Option<usize>,
        /// Probability of replacing a label with the unconditional row.
        label_dropout: f64,
    },
}

impl Source<'_> {
    pub fn batch<S: Scalar>(&self, arch: &ArchConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch<S>> {
        match *self {
            Source::Points(m) => {
                if arch.height != 1 || arch.channels != 2 {
                    return Err(affiner::Error::Invalid(format!(
                        "point sets need a 1×T×2 architecture, got {}×{}×{}",
                        arch.height, arch.width, arch.channels
                    )));
                }
                Ok(Batch {
                    x0: m.batch(n, arch.width, rng),
                    classes: vec![uncond(arch); n],
                    cond: None,
                })
            }
            Source::Images {
                set,
                paired,
                first_label,
                label_dropout,
            } => {
                if arch.height != set.size || arch.width != set.size || arch.channels != 3 {
                    return Err(affiner::Error::Invalid(format!(
                        "{}×{} RGB images do not fit a {}×{}×{} architecture",
                        set.size, set.size, arch.height, arch.width, arch.channels
                    )));
                }
                let (x0, cond, families) = set.batch(n, rng);
                let classes = families
                    .into_iter()
                    .map(|f| {
                        if rng.random::<f64>() < label_dropout {
                            return uncond(arch);
                        }
                        image_label(set, f, first_label)
                    })
                    .collect();
                Ok(Batch {
                    x0,
                    classes,
                    cond: paired.then_some(cond),
                })
            }
        }
    }
}

/// Class label of an image family: its own index, or its position after `first_label`.
pub fn image_label(set: &ImageSet, family: usize, first_label: Option<usize>) -> usize {
    match first_label {
        None => family,
        Some(first) => first + set.families.iter().position(|g| g.index() == family).unwrap_or(0),
    }
}

/// Index of the unconditional class row.
pub fn uncond(arch: &ArchConfig) -> usize {
    arch.classes
}

fn log_progress(what: &str, step: usize, total: usize, loss: f64) {
    if step == 0 || (step + 1).is_multiple_of(250) || step + 1 == total {
        info!("{what} step {}/{total} loss {loss:.5}", step + 1);
    } else {
        debug!("{what} step {}/{total} loss {loss:.5}", step + 1);
    }
}

/// Trains every backbone parameter.
pub fn pretrain<S: Scalar>(
    backbone: &mut Backbone<S>,
    source: Source<'_>,
    schedule: &Schedule,
    spec: &TrainSpec,
) -> Result<LossCurve> {
    let arch = backbone.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "pretrain"));
    let mut opt = spec.optim.adam();
    let mut curve = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let batch = source.batch(&arch, spec.batch, &mut rng)?;
        let loss = train_step_backbone(backbone, &batch, schedule, &mut opt, &mut rng)?;
        log_progress("pretrain", step, spec.steps, loss);
        curve.push(loss);
    }
    Ok(curve)
}

/// Trains only the adapter set.
pub fn adapt<S: Scalar>(
    backbone: &Backbone<S>,
    set: &mut AdapterSet<S>,
    source: Source<'_>,
    schedule: &Schedule,
    spec: &TrainSpec,
    mask_ratio: f64,
) -> Result<LossCurve> {
    let arch = backbone.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "adapt"));
    let mut opt = spec.optim.adam();
    let mut curve = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let batch = source.batch(&arch, spec.batch, &mut rng)?;
        let loss = train_step_adapters(backbone, set, &batch, schedule, mask_ratio, &mut opt, &mut rng)?;
        log_progress("adapt", step, spec.steps, loss);
        curve.push(loss);
    }
    Ok(curve)
}

/// Draws `n` points (rounded up to whole point sets, then truncated).
pub fn sample_points<S: Scalar>(
    backbone: &Backbone<S>,
    set: Option<&AdapterSet<S>>,
    n: usize,
    schedule: &Schedule,
    sampler: &SamplerConfig,
) -> Result<Vec<[f64; 2]>> {
    let arch = backbone.config();
    let sets = n.div_ceil(arch.width);
    if sets == 0 {
        return Ok(Vec::new());
    }
    let classes = vec![uncond(arch); sets];
    let x: Tensor<S> = sample(
        |x, t, cls| backbone.denoise(x, &vec![t; cls.len()], cls, None, set, None),
        &[sets, arch.height, arch.width, arch.channels],
        &classes,
        uncond(arch),
        schedule,
        sampler,
    )?;
    let mut pts = points_of(&x);
    pts.truncate(n);
    Ok(pts)
}

/// Draws one image per entry of `classes`, `[n, H, W, C]`, optionally under condition maps `[n, H, W, k]`.
pub fn sample_images<S: Scalar>(
    backbone: &Backbone<S>,
    set: Option<&AdapterSet<S>>,
    classes: &[usize],
    cond: Option<&Tensor<S>>,
    schedule: &Schedule,
    sampler: &SamplerConfig,
) -> Result<Tensor<S>> {
    let arch = backbone.config();
    sample(
        |x, t, cls| backbone.denoise(x, &vec![t; cls.len()], cls, cond, set, None),
        &[classes.len(), arch.height, arch.width, arch.channels],
        classes,
        uncond(arch),
        schedule,
        sampler,
    )
}

/// Mean of the last `k` entries.
pub fn tail_mean(curve: &[f64], k: usize) -> f64 {
    let tail = &curve[curve.len().saturating_sub(k)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}
