use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{ArchConfig, Backbone};
use crate::registry::{AdapterSet, AdapterSpec};

#[test]
fn linear_schedule_values() {
    let s = Schedule::default();
    assert_eq!(s.len(), 1000);
    assert!((s.beta(0) - 1e-4).abs() < 1e-15);
    assert!((s.beta(999) - 2e-2).abs() < 1e-15);
    assert!((s.alpha_bar(0) - (1.0 - 1e-4)).abs() < 1e-15);
    let prod: f64 = (0..10).map(|i| 1.0 - s.beta(i)).product();
    assert!((s.alpha_bar(9) - prod).abs() < 1e-15);
    assert!(s.alpha_bar(999) < 1e-4);
    assert_eq!(s.alpha_bar_at(None), 1.0);
    assert!(Schedule::linear(0, 1e-4, 2e-2).is_err());
    assert!(Schedule::linear(10, 0.3, 0.2).is_err());
}

#[test]
fn q_sample_examples() {
    assert_eq!(q_sample_scalar(2.0, 1.0, 0.25), 1.0 + 0.75f64.sqrt());
    assert_eq!(q_sample_scalar(3.0, -1.0, 1.0), 3.0);
    let s = Schedule::default();
    let x0 = Tensor::<f64>::from_f64(vec![2, 1], &[1.0, 1.0]).unwrap();
    let eps = Tensor::from_f64(vec![2, 1], &[0.5, 0.5]).unwrap();
    let y = s.q_sample(&x0, &[0, 999], &eps).unwrap();
    let ab = [s.alpha_bar(0), s.alpha_bar(999)];
    for i in 0..2 {
        assert!((y.data()[i] - (ab[i].sqrt() + 0.5 * (1.0 - ab[i]).sqrt())).abs() < 1e-15);
    }
    assert!(s.q_sample(&x0, &[1000], &eps).is_err());
    assert!(s.q_sample(&x0, &[0, 1, 2], &eps).is_err());
}

#[test]
fn q_sample_marginal_moments() {
    let s = Schedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    for t in [10, 250, 700] {
        let x0 = Tensor::<f64>::full(vec![n], 1.5);
        let eps = Tensor::randn(vec![n], 1.0, &mut rng);
        let y = s.q_sample(&x0, &[t], &eps).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        assert!((mean - 1.5 * ab.sqrt()).abs() < 0.02, "t={t} mean {mean}");
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.02, "t={t} var {var}");
    }
}

#[test]
fn ddim_examples() {
    let x = Tensor::<f64>::from_f64(vec![1], &[1.0]).unwrap();
    let e = Tensor::from_f64(vec![1], &[1.0]).unwrap();
    // to the clean end the update returns the x0 estimate
    let y = ddim_update(&x, &e, 0.25, 1.0, 0.0, None).unwrap();
    assert!((y.data()[0] - (1.0 - 0.75f64.sqrt()) / 0.5).abs() < 1e-15);
    // ε exactly consistent with x0 = 0 keeps x on the noise direction
    let y = ddim_update(&x, &e, 0.0001, 0.5, 0.0, None).unwrap();
    let x0 = (1.0 - 0.9999f64.sqrt()) / 0.01;
    assert!((y.data()[0] - (0.5f64.sqrt() * x0 + 0.5f64.sqrt())).abs() < 1e-12);
    assert_eq!(ddim_sigma(0.3, 0.6, 0.0), 0.0);
    assert!(ddim_update(&x, &e, 0.5, 0.7, 1.0, None).is_err());
    assert!(Schedule::default().ddim_step(&x, &e, 10, Some(10), 0.0, None).is_err());
}

#[test]
fn ddim_eta_one_equals_ancestral_step() {
    let s = Schedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (t, prev) in [(999, Some(998)), (500, Some(250)), (40, Some(0)), (7, None)] {
        let x = Tensor::<f64>::randn(vec![16], 1.0, &mut rng);
        let e = Tensor::randn(vec![16], 1.0, &mut rng);
        let z = Tensor::randn(vec![16], 1.0, &mut rng);
        let a = s.ddim_step(&x, &e, t, prev, 1.0, Some(&z)).unwrap();
        let b = s.ddpm_step(&x, &e, t, prev, Some(&z)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10, "t={t}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn timestep_sequences() {
    assert_eq!(timesteps(1000, 4).unwrap(), vec![750, 500, 250, 0]);
    assert_eq!(timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
    assert!(timesteps(10, 0).is_err());
    assert!(timesteps(10, 11).is_err());
}

/// Exact noise predictor for data `N(μ, Σ)` in two dimensions.
fn gaussian_eps(schedule: &Schedule, mu: [f64; 2], cov: [[f64; 2]; 2]) -> impl Fn(&Tensor<f64>, usize) -> Tensor<f64> + '_ {
    move |x, t| {
        let ab = schedule.alpha_bar(t);
        let m = [
            [ab * cov[0][0] + 1.0 - ab, ab * cov[0][1]],
            [ab * cov[1][0], ab * cov[1][1] + 1.0 - ab],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let k = (1.0 - ab).sqrt();
        let mut out = Vec::with_capacity(x.numel());
        for p in x.data().chunks(2) {
            let d = [p[0] - ab.sqrt() * mu[0], p[1] - ab.sqrt() * mu[1]];
            out.push(k * (inv[0][0] * d[0] + inv[0][1] * d[1]));
            out.push(k * (inv[1][0] * d[0] + inv[1][1] * d[1]));
        }
        Tensor::new(x.shape(), out).unwrap()
    }
}

fn moments(x: &Tensor<f64>) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = x.shape()[0] as f64;
    let mut mean = [0.0; 2];
    for p in x.data().chunks(2) {
        mean[0] += p[0] / n;
        mean[1] += p[1] / n;
    }
    let mut cov = [[0.0; 2]; 2];
    for p in x.data().chunks(2) {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] += d[i] * d[j] / (n - 1.0);
            }
        }
    }
    (mean, cov)
}

#[test]
fn samplers_recover_gaussian_toy() {
    let s = Schedule::default();
    let mu = [1.0, -2.0];
    let cov = [[1.0, 0.6], [0.6, 2.0]];
    let eps = gaussian_eps(&s, mu, cov);
    let n = 20_000;
    let classes = vec![0; n];
    let configs = [
        SamplerConfig::ddim(100, 3),
        SamplerConfig {
            kind: SamplerKind::Ddim { eta: 1.0 },
            steps: 1000,
            guidance: None,
            seed: 4,
        },
        SamplerConfig {
            kind: SamplerKind::Ddpm,
            steps: 1000,
            guidance: None,
            seed: 5,
        },
    ];
    for cfg in configs {
        let x = sample(|x, t, _| Ok(eps(x, t)), &[n, 2], &classes, 0, &s, &cfg).unwrap();
        let (m, c) = moments(&x);
        for i in 0..2 {
            assert!((m[i] - mu[i]).abs() < 0.05 * mu[i].abs(), "{cfg:?} mean {m:?}");
            for j in 0..2 {
                assert!((c[i][j] - cov[i][j]).abs() < 0.05 * cov[i][j].abs(), "{cfg:?} cov {c:?}");
            }
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let s = Schedule::default();
    let eps = gaussian_eps(&s, [0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]);
    let cfg = SamplerConfig {
        kind: SamplerKind::Ddpm,
        steps: 50,
        guidance: None,
        seed: 9,
    };
    let a = sample(|x, t, _| Ok(eps(x, t)), &[8, 2], &[0; 8], 0, &s, &cfg).unwrap();
    let b = sample(|x, t, _| Ok(eps(x, t)), &[8, 2], &[0; 8], 0, &s, &cfg).unwrap();
    let c = sample(|x, t, _| Ok(eps(x, t)), &[8, 2], &[0; 8], 0, &s, &SamplerConfig { seed: 10, ..cfg }).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
}

#[test]
fn guidance_combines_predictions() {
    let s = Schedule::default();
    let calls = RefCell::new(Vec::new());
    // class k predicts the constant k
    let model = |x: &Tensor<f64>, _t: usize, classes: &[usize]| {
        calls.borrow_mut().push(classes[0]);
        Ok(Tensor::full(x.shape().to_vec(), classes[0] as f64))
    };
    let run = |w: Option<f64>| {
        calls.borrow_mut().clear();
        let cfg = SamplerConfig {
            guidance: w,
            ..SamplerConfig::ddim(1, 0)
        };
        let out = sample(model, &[1, 1], &[2], 5, &s, &cfg).unwrap();
        (out, calls.borrow().clone())
    };
    let x_t = Tensor::<f64>::randn(vec![1, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let expect = |e: f64| ddim_update(&x_t, &Tensor::full(vec![1, 1], e), s.alpha_bar(0), 1.0, 0.0, None).unwrap();

    let (out, seen) = run(None);
    assert_eq!(seen, vec![2]);
    assert!(out.bit_eq(&expect(2.0)));
    let (out, seen) = run(Some(0.0));
    assert_eq!(seen, vec![5]);
    assert!(out.bit_eq(&expect(5.0)));
    let (_, seen) = run(Some(1.0));
    assert_eq!(seen, vec![2]);
    let (out, seen) = run(Some(3.0));
    assert_eq!(seen, vec![5, 2]);
    // ε_u + w (ε_c − ε_u) = 5 + 3 (2 − 5)
    assert!(out.max_abs_diff(&expect(-4.0)) < 1e-12);
}

fn tiny() -> ArchConfig {
    ArchConfig {
        height: 1,
        width: 4,
        channels: 2,
        patch: 1,
        hidden: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        classes: 2,
        freq_dim: 8,
        cond_channels: 0,
        ..ArchConfig::point_set()
    }
}

fn tiny_batch() -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    Batch {
        x0: Tensor::randn(vec![4, 1, 4, 2], 1.0, &mut rng),
        classes: vec![0, 1, 0, 1],
        cond: None,
    }
}

#[test]
fn loss_oracle_and_mask() {
    let tape = crate::autodiff::Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(vec![1, 1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::zeros(vec![1, 1, 4, 1]));
    let full = denoising_loss(a, b, None, 1).unwrap();
    assert_eq!(full.value().item(), 7.5);
    let plan = crate::backbone::make_mask(4, 0.5, 0).unwrap();
    let masked = denoising_loss(a, b, Some(&plan), 1).unwrap();
    let expect = plan.kept.iter().map(|&k| ((k + 1) * (k + 1)) as f64).sum::<f64>() / 2.0;
    assert_eq!(masked.value().item(), expect);
}

#[test]
fn adapter_training_lowers_loss_and_keeps_backbone() {
    let s = Schedule::default();
    let mut backbone = Backbone::<f64>::new(&tiny(), 0).unwrap();
    let mut opt = Adam::new(1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = tiny_batch();
    for _ in 0..30 {
        train_step_backbone(&mut backbone, &batch, &s, &mut opt, &mut rng).unwrap();
    }
    let fp = backbone.fingerprint();
    let mut set = AdapterSet::create(&backbone, "t", &AdapterSpec::affiner(2, 0)).unwrap();
    let noise = draw_noise(&batch.x0, &s, &mut rng);
    let before = eval_loss(&backbone, Some(&set), &batch, &s, &noise, None).unwrap();
    let mut opt = Adam::new(1e-2);
    for _ in 0..40 {
        adapter_step_with(&backbone, &mut set, &batch, &s, &noise, None, &mut opt).unwrap();
    }
    let after = eval_loss(&backbone, Some(&set), &batch, &s, &noise, None).unwrap();
    assert!(after < before, "{after} >= {before}");
    assert_eq!(backbone.fingerprint(), fp);
    assert_eq!(opt.steps(), 40);
}

#[test]
fn backbone_training_lowers_loss() {
    let s = Schedule::default();
    let mut backbone = Backbone::<f64>::new(&tiny(), 1).unwrap();
    let batch = tiny_batch();
    let noise = draw_noise(&batch.x0, &s, &mut ChaCha8Rng::seed_from_u64(9));
    let before = eval_loss(&backbone, None, &batch, &s, &noise, None).unwrap();
    let fp = backbone.fingerprint();
    let mut opt = Adam::new(1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..60 {
        train_step_backbone(&mut backbone, &batch, &s, &mut opt, &mut rng).unwrap();
    }
    let after = eval_loss(&backbone, None, &batch, &s, &noise, None).unwrap();
    assert_ne!(backbone.fingerprint(), fp);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn masked_adapter_step_runs() {
    let s = Schedule::default();
    let backbone = Backbone::<f64>::new(&tiny(), 0).unwrap();
    let mut set = AdapterSet::create(&backbone, "t", &AdapterSpec::affiner(2, 0)).unwrap();
    let mut opt = Adam::new(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = train_step_adapters(&backbone, &mut set, &tiny_batch(), &s, 0.5, &mut opt, &mut rng).unwrap();
    assert!(loss.is_finite());
}

#[test]
fn divergence_is_reported() {
    let s = Schedule::default();
    let backbone = Backbone::<f64>::new(&tiny(), 0).unwrap();
    let mut set = AdapterSet::create(&backbone, "t", &AdapterSpec::affiner(2, 0)).unwrap();
    let mut batch = tiny_batch();
    batch.x0.data_mut()[0] = f64::NAN;
    let mut opt = Adam::new(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = train_step_adapters(&backbone, &mut set, &batch, &s, 0.0, &mut opt, &mut rng).unwrap_err();
    assert!(matches!(err, crate::Error::Diverged { step: 1, .. } | crate::Error::NonFinite(_)), "{err:?}");
}
