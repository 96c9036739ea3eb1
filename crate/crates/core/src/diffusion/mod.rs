//! Noise schedule, forward process, samplers and the denoising objective.

mod optim;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use optim::Adam;
pub use train::{
    adapter_step_with, denoising_loss, draw_noise, eval_loss, train_step_adapters, train_step_backbone, Batch, StepNoise,
};

/// Linear-β variance schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for Schedule {
    /// 1000 steps, β from 1e-4 to 2e-2.
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid defaults")
    }
}

impl Schedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "need steps >= 1 and 0 < beta_start <= beta_end < 1, got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `ᾱ` of an optional timestep; `None` is the clean end with `ᾱ = 1`.
    pub fn alpha_bar_at(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::IndexOutOfRange {
                what: "timesteps",
                index: t,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε`, one timestep per batch item (leading axis).
    pub fn q_sample<S: Scalar>(&self, x0: &Tensor<S>, t: &[usize], eps: &Tensor<S>) -> Result<Tensor<S>> {
        if x0.shape() != eps.shape() {
            return shape_err("q_sample", x0.shape(), eps.shape());
        }
        let b = x0.shape().first().copied().unwrap_or(1);
        if t.len() != b && t.len() != 1 {
            return shape_err("q_sample", x0.shape(), &[t.len()]);
        }
        for &ti in t {
            self.check(ti)?;
        }
        let per = x0.numel() / b.max(1);
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (&x, &e))| {
                let ab = self.alpha_bars[t[if t.len() == 1 { 0 } else { i / per }]];
                q_sample_scalar(x.as_f64(), e.as_f64(), ab)
            })
            .map(S::from_f64)
            .collect();
        Tensor::new(x0.shape(), data)
    }

    /// DDIM update from `t` to `t_prev` (`None` for the clean end).
    ///
    /// `z` supplies the fresh noise and is only read when `eta > 0`.
    pub fn ddim_step<S: Scalar>(
        &self,
        x_t: &Tensor<S>,
        eps_hat: &Tensor<S>,
        t: usize,
        t_prev: Option<usize>,
        eta: f64,
        z: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        self.check(t)?;
        if let Some(tp) = t_prev {
            if tp >= t {
                return Err(Error::Invalid(format!("ddim_step needs t_prev < t, got {tp} >= {t}")));
            }
        }
        ddim_update(x_t, eps_hat, self.alpha_bar(t), self.alpha_bar_at(t_prev), eta, z)
    }

    /// DDPM ancestral update between two timesteps of a (possibly strided) sequence.
    pub fn ddpm_step<S: Scalar>(
        &self,
        x_t: &Tensor<S>,
        eps_hat: &Tensor<S>,
        t: usize,
        t_prev: Option<usize>,
        z: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        self.check(t)?;
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar_at(t_prev);
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let sigma = if t_prev.is_some() {
            ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt()
        } else {
            0.0
        };
        let c_eps = beta / (1.0 - ab_t).sqrt();
        let inv = 1.0 / alpha.sqrt();
        combine(x_t, eps_hat, z, sigma, |x, e| inv * (x - c_eps * e))
    }
}

pub fn q_sample_scalar(x0: f64, eps: f64, alpha_bar: f64) -> f64 {
    alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps
}

/// DDIM update written directly in terms of `ᾱ_t` and `ᾱ_prev`.
pub fn ddim_update<S: Scalar>(
    x_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    ab_t: f64,
    ab_prev: f64,
    eta: f64,
    z: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    if ab_t <= 0.0 {
        return Err(Error::Invalid(format!("alpha_bar_t must be positive, got {ab_t}")));
    }
    let sigma = ddim_sigma(ab_t, ab_prev, eta);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa_t, s1_t, sa_prev) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_prev.sqrt());
    combine(x_t, eps_hat, z, sigma, |x, e| {
        let x0 = (x - s1_t * e) / sa_t;
        sa_prev * x0 + dir * e
    })
}

/// `σ = η √((1−ᾱ_prev)/(1−ᾱ_t)) √(1−ᾱ_t/ᾱ_prev)`.
pub fn ddim_sigma(ab_t: f64, ab_prev: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt()
}

fn combine<S: Scalar>(
    x_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    z: Option<&Tensor<S>>,
    sigma: f64,
    mean: impl Fn(f64, f64) -> f64,
) -> Result<Tensor<S>> {
    if x_t.shape() != eps_hat.shape() {
        return shape_err("sampler step", x_t.shape(), eps_hat.shape());
    }
    let noise = if sigma > 0.0 {
        let z = z.ok_or_else(|| Error::Invalid("stochastic step needs noise".into()))?;
        if z.shape() != x_t.shape() {
            return shape_err("sampler step", x_t.shape(), z.shape());
        }
        Some(z)
    } else {
        None
    };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let mut v = mean(x.as_f64(), e.as_f64());
            if let Some(z) = noise {
                v += sigma * z.data()[i].as_f64();
            }
            S::from_f64(v)
        })
        .collect();
    Tensor::new(x_t.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerKind {
    Ddpm,
    Ddim { eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Classifier-free guidance weight `w`; `None` evaluates the requested class directly.
    pub guidance: Option<f64>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn ddim(steps: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::Ddim { eta: 0.0 },
            steps,
            guidance: None,
            seed,
        }
    }
}

/// Descending timesteps `⌊i·T/steps⌋` for `i = steps−1 .. 0`.
pub fn timesteps(t_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_train {
        return Err(Error::Invalid(format!("sampling steps must be in 1..={t_train}, got {steps}")));
    }
    Ok((0..steps).rev().map(|i| i * t_train / steps).collect())
}

/// Runs the reverse process from `x_T ~ N(0, I)` of the given shape.
///
/// `eps_model(x, t, classes)` predicts the noise for every batch item at timestep `t`.
/// With guidance `w`, the prediction is `ε_u + w (ε_c − ε_u)` where `ε_u` uses `uncond_class`.
pub fn sample<S: Scalar>(
    mut eps_model: impl FnMut(&Tensor<S>, usize, &[usize]) -> Result<Tensor<S>>,
    shape: &[usize],
    classes: &[usize],
    uncond_class: usize,
    schedule: &Schedule,
    config: &SamplerConfig,
) -> Result<Tensor<S>> {
    let ts = timesteps(schedule.len(), config.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = Tensor::<S>::randn(shape.to_vec(), 1.0, &mut rng);
    let uncond = vec![uncond_class; classes.len()];
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied();
        let eps = match config.guidance {
            None => eps_model(&x, t, classes)?,
            Some(w) if w == 0.0 => eps_model(&x, t, &uncond)?,
            Some(w) if w == 1.0 => eps_model(&x, t, classes)?,
            Some(w) => {
                let eu = eps_model(&x, t, &uncond)?;
                let ec = eps_model(&x, t, classes)?;
                let data = eu
                    .data()
                    .iter()
                    .zip(ec.data())
                    .map(|(&u, &c)| S::from_f64(u.as_f64() + w * (c.as_f64() - u.as_f64())))
                    .collect();
                Tensor::new(eu.shape(), data)?
            }
        };
        let stochastic = match config.kind {
            SamplerKind::Ddpm => t_prev.is_some(),
            SamplerKind::Ddim { eta } => eta > 0.0,
        };
        let z = stochastic.then(|| Tensor::<S>::randn(shape.to_vec(), 1.0, &mut rng));
        x = match config.kind {
            SamplerKind::Ddpm => schedule.ddpm_step(&x, &eps, t, t_prev, z.as_ref())?,
            SamplerKind::Ddim { eta } => schedule.ddim_step(&x, &eps, t, t_prev, eta, z.as_ref())?,
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests;
