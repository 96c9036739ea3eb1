use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::affiner::Method;
use crate::autodiff::Tape;
use crate::nn::{Ctx, DispatchProbe};
use crate::registry::{AdapterSet, AdapterSpec};

fn small_dit() -> ArchConfig {
    ArchConfig {
        kind: ArchKind::Dit,
        height: 4,
        width: 4,
        channels: 2,
        patch: 1,
        hidden: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        classes: 3,
        freq_dim: 16,
        cond_channels: 1,
    }
}

fn small_cnn() -> ArchConfig {
    ArchConfig {
        height: 8,
        width: 8,
        hidden: 8,
        ..ArchConfig::cnn_toy()
    }
}

/// Perturbs every array so zero-initialised heads and gates carry signal.
fn randomized(config: &ArchConfig, seed: u64) -> Backbone<f64> {
    let mut b = Backbone::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    b.visit_mut(&mut |_, t| {
        let noise = Tensor::randn(t.shape().to_vec(), 0.2, &mut rng);
        t.add_assign(&noise).unwrap();
    });
    b
}

fn inputs(config: &ArchConfig, batch: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(vec![batch, config.height, config.width, config.channels], 1.0, &mut rng);
    let c = Tensor::randn(vec![batch, config.height, config.width, config.cond_channels.max(1)], 1.0, &mut rng);
    (x, c)
}

#[test]
fn fresh_backbone_predicts_zero() {
    let cfg = small_dit();
    let b = Backbone::<f64>::new(&cfg, 0).unwrap();
    let (x, _) = inputs(&cfg, 2, 1);
    let y = b.denoise(&x, &[10, 500], &[0, 3], None, None, None).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn construction_is_deterministic() {
    let a = Backbone::<f32>::new(&small_dit(), 5).unwrap();
    let b = Backbone::<f32>::new(&small_dit(), 5).unwrap();
    let c = Backbone::<f32>::new(&small_dit(), 6).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn fingerprint_tracks_mutation() {
    let mut b = Backbone::<f32>::new(&small_dit(), 5).unwrap();
    let before = b.fingerprint();
    b.visit_mut(&mut |name, t| {
        if name == "blocks.0.attn.q.weight" {
            t.data_mut()[0] += 1.0;
        }
    });
    assert_ne!(before, b.fingerprint());
}

#[test]
fn fresh_adapters_are_transparent() {
    for cfg in [small_dit(), small_cnn()] {
        let b = randomized(&cfg, 3);
        let (x, c) = inputs(&cfg, 2, 4);
        let t = [17, 900];
        let classes = [0, 2];
        let base = b.denoise(&x, &t, &classes, None, None, None).unwrap();
        assert!(base.data().iter().any(|&v| v != 0.0));
        let methods = [Method::Affiner { rank: 3 }, Method::Lora { rank: 2 }, Method::BiasOnly];
        for method in methods {
            let spec = AdapterSpec::affiner(3, 9).with_method(method).with_classes(2).with_cond(true);
            let set = AdapterSet::create(&b, "t", &spec).unwrap();
            let y = b.denoise(&x, &t, &classes, Some(&c), Some(&set), None).unwrap();
            assert!(y.bit_eq(&base), "{cfg:?} {method:?} diff {}", y.max_abs_diff(&base));
        }
    }
}

#[test]
fn new_class_matches_unconditional_row() {
    let cfg = small_dit();
    let b = randomized(&cfg, 11);
    let set = AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 1).with_classes(2)).unwrap();
    let (x, _) = inputs(&cfg, 1, 2);
    let uc = b.class_table().uncond_index();
    let u = b.denoise(&x, &[300], &[uc], None, Some(&set), None).unwrap();
    for k in 1..=2 {
        let y = b.denoise(&x, &[300], &[uc + k], None, Some(&set), None).unwrap();
        assert!(y.bit_eq(&u));
    }
    assert!(matches!(
        b.denoise(&x, &[300], &[uc + 3], None, Some(&set), None),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn masked_blocks_see_kept_tokens_only() {
    let cfg = small_dit();
    let b = randomized(&cfg, 12);
    let set = AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 1)).unwrap();
    let plan = make_mask(16, 0.5, 3).unwrap();
    assert_eq!(plan.kept.len(), 8);
    let (x, _) = inputs(&cfg, 2, 2);
    let tape = Tape::new();
    let probe = DispatchProbe::new();
    let ctx = Ctx::new(&tape).with_adapters(Some(&set)).with_probe(&probe);
    let input = DenoiseInput {
        x: tape.constant(x.clone()),
        t: &[5, 6],
        classes: &[0, 1],
        cond: None,
        mask: Some(&plan),
    };
    let out = b.forward(&ctx, input).unwrap();
    assert_eq!(out.shape(), x.shape());
    let calls = probe.calls();
    assert_eq!(calls.len(), 2 * 7);
    for call in calls.iter().filter(|c| !c.layer_id.ends_with("adaln")) {
        assert_eq!(call.input_shape[..2], [2, 8], "{}", call.layer_id);
    }
}

#[test]
fn zero_ratio_mask_is_unmasked_forward() {
    let cfg = small_dit();
    let b = randomized(&cfg, 13);
    let (x, _) = inputs(&cfg, 1, 2);
    let plan = make_mask(16, 0.0, 1).unwrap();
    let y = b.denoise(&x, &[40], &[1], None, None, Some(&plan)).unwrap();
    let z = b.denoise(&x, &[40], &[1], None, None, None).unwrap();
    assert!(y.bit_eq(&z));
}

#[test]
fn masking_is_rejected_by_cnn() {
    let cfg = small_cnn();
    let b = Backbone::<f64>::new(&cfg, 0).unwrap();
    let (x, _) = inputs(&cfg, 1, 2);
    let plan = make_mask(64, 0.5, 1).unwrap();
    assert!(b.denoise(&x, &[1], &[0], None, None, Some(&plan)).is_err());
}

#[test]
fn mask_plans() {
    assert_eq!(make_mask(256, 0.5, 0).unwrap().kept.len(), 128);
    assert_eq!(make_mask(10, 0.75, 0).unwrap().kept.len(), 3);
    assert_eq!(make_mask(4, 0.99, 0).unwrap().kept.len(), 1);
    let p = make_mask(64, 0.3, 42).unwrap();
    assert_eq!(p, make_mask(64, 0.3, 42).unwrap());
    assert!(p.kept.windows(2).all(|w| w[0] < w[1]));
    assert!(p.kept.iter().all(|&k| k < 64));
    assert!(make_mask(16, 1.0, 0).is_err());
    assert!(make_mask(16, -0.1, 0).is_err());
}

#[test]
fn condition_injection_examples() {
    let tape = Tape::<f64>::new();
    let ctx = Ctx::new(&tape);
    let tokens = tape.constant(Tensor::zeros(vec![1, 2, 2]));
    let cond = tape.constant(Tensor::from_f64(vec![1, 2, 1], &[1.0, 2.0]).unwrap());
    let mut inj = crate::registry::CondInjection {
        gate: Tensor::scalar(0.0),
        proj: Tensor::from_f64(vec![2, 1], &[1.0, -1.0]).unwrap(),
    };
    let y = dit::inject_condition(&ctx, tokens, cond, &inj).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
    // bindings are cached per context, so a changed gate needs a fresh one
    inj.gate = Tensor::scalar(0.5);
    let ctx = Ctx::new(&tape);
    let y = dit::inject_condition(&ctx, tokens, cond, &inj).unwrap();
    assert_eq!(y.value().data(), &[0.5, -0.5, 1.0, -1.0]);
    let bad = tape.constant(Tensor::zeros(vec![1, 3, 1]));
    assert!(dit::inject_condition(&ctx, tokens, bad, &inj).is_err());
}

#[test]
fn condition_changes_output_once_gate_opens() {
    let cfg = small_dit();
    let b = randomized(&cfg, 14);
    let mut set = AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 1).with_cond(true)).unwrap();
    let (x, c) = inputs(&cfg, 1, 2);
    let base = b.denoise(&x, &[40], &[1], Some(&c), Some(&set), None).unwrap();
    set.cond.as_mut().unwrap().gate = Tensor::scalar(1.0);
    let y = b.denoise(&x, &[40], &[1], Some(&c), Some(&set), None).unwrap();
    assert!(y.max_abs_diff(&base) > 1e-6);
}

#[test]
fn patchify_round_trip() {
    let tape = Tape::<f64>::new();
    let x = Tensor::from_fn(vec![2, 4, 6, 3], |i| i as f64);
    let v = tape.constant(x.clone());
    let p = patchify(v, 2).unwrap();
    assert_eq!(p.shape(), vec![2, 6, 12]);
    // first token holds the top-left 2×2 patch, row-major with channels innermost
    assert_eq!(&p.value().data()[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(&p.value().data()[6..9], &[18.0, 19.0, 20.0]);
    let back = unpatchify(p, 2, 4, 6, 3).unwrap();
    assert!(back.value().bit_eq(&x));
    assert!(patchify(v, 4).is_err());
}

#[test]
fn timestep_features_examples() {
    let f = timestep_features::<f64>(&[0, 7], 4).unwrap();
    assert_eq!(&f.data()[..4], &[1.0, 1.0, 0.0, 0.0]);
    let freq1 = 1.0_f64 / 10_000f64.powf(0.5);
    let expect = [7f64.cos(), (7.0 * freq1).cos(), 7f64.sin(), (7.0 * freq1).sin()];
    for (a, b) in f.data()[4..].iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn positional_table_shape_and_bounds() {
    let p = positional_table::<f64>(2, 3, 8);
    assert_eq!(p.shape(), &[6, 8]);
    assert!(p.data().iter().all(|v| v.abs() <= 1.0));
    assert_ne!(p.row(0).unwrap(), p.row(1).unwrap());
}

#[test]
fn cnn_shapes_and_layers() {
    let cfg = small_cnn();
    let b = randomized(&cfg, 2);
    let (x, _) = inputs(&cfg, 2, 1);
    let y = b.denoise(&x, &[1, 2], &[0, 4], None, None, None).unwrap();
    assert_eq!(y.shape(), x.shape());
    let ids: Vec<_> = b.wrapped_layers().iter().map(|l| l.id.clone()).collect();
    assert!(ids.contains(&"down1.skip".to_string()));
    assert!(!ids.contains(&"down0.skip".to_string()));
    assert_eq!(b.tokens(), None);
}

#[test]
fn count_model_matches_instantiated_layers() {
    for cfg in [small_dit(), small_cnn(), ArchConfig::point_set()] {
        let b = Backbone::<f32>::new(&cfg, 0).unwrap();
        let analytic = cfg.count_model();
        let built = b.count_model();
        assert_eq!(analytic.backbone_total, b.param_count());
        assert_eq!(analytic.layers.len(), b.wrapped_layers().len());
        for (a, l) in analytic.layers.iter().zip(&built.layers) {
            assert_eq!((a.id.as_str(), a.m, a.n, a.role), (l.id.as_str(), l.m, l.n, l.role));
        }
    }
}

#[test]
fn shape_errors_are_reported() {
    let cfg = small_dit();
    let b = Backbone::<f64>::new(&cfg, 0).unwrap();
    let x = Tensor::zeros(vec![1, 4, 4, 3]);
    assert!(matches!(b.denoise(&x, &[1], &[0], None, None, None), Err(Error::Shape { .. })));
    let x = Tensor::zeros(vec![2, 4, 4, 2]);
    assert!(b.denoise(&x, &[1], &[0, 0], None, None, None).is_err());
}
