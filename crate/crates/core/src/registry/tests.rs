use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::ArchConfig;
use crate::diffusion::{adapter_step_with, draw_noise, Adam, Batch, Schedule};

fn config() -> ArchConfig {
    ArchConfig {
        height: 4,
        width: 4,
        channels: 2,
        patch: 2,
        hidden: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        classes: 3,
        freq_dim: 16,
        cond_channels: 1,
        ..ArchConfig::dit_toy()
    }
}

fn backbone(seed: u64) -> Backbone<f64> {
    let mut b = Backbone::new(&config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    b.visit_mut(&mut |_, t| t.add_assign(&Tensor::randn(t.shape().to_vec(), 0.2, &mut rng)).unwrap());
    b
}

fn batch(seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        x0: Tensor::randn(vec![2, 4, 4, 2], 1.0, &mut rng),
        classes: vec![0, 1],
        cond: None,
    }
}

/// Runs `n` deterministic adapter steps on the named task.
fn train(reg: &mut Registry<f64>, task: &str, n: usize, seed: u64) {
    let schedule = Schedule::default();
    let mut opt = Adam::new(1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let b = batch(seed);
        let noise = draw_noise(&b.x0, &schedule, &mut rng);
        let (bb, set) = reg.split_mut(task).unwrap();
        adapter_step_with(bb, set, &b, &schedule, &noise, None, &mut opt).unwrap();
    }
}

fn probe_input() -> Tensor<f64> {
    Tensor::randn(vec![1, 4, 4, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(77))
}

#[test]
fn create_targets_every_wrapped_layer() {
    let b = backbone(0);
    let set = AdapterSet::create(&b, "a", &AdapterSpec::affiner(2, 0)).unwrap();
    assert_eq!(set.entries.len(), b.wrapped_layers().len());
    let lora = AdapterSet::create(&b, "l", &AdapterSpec::affiner(2, 0).with_method(Method::Lora { rank: 2 })).unwrap();
    assert_eq!(lora.entries.len(), 2 * 4);
    assert!(lora.entries.keys().all(|k| k.contains(".attn.")));
    assert_eq!(set.origin, Origin::Fresh);
    let total: usize = b
        .wrapped_layers()
        .iter()
        .map(|l| 2 * l.out_dim() + 1 + 2 * (l.out_dim() + l.in_dim()))
        .sum();
    assert_eq!(set.param_count(), total);
}

#[test]
fn new_class_rows_copy_the_unconditional_row() {
    let b = backbone(0);
    let set = AdapterSet::create(&b, "a", &AdapterSpec::affiner(2, 0).with_classes(3)).unwrap();
    let rows = set.new_class_rows.as_ref().unwrap();
    assert_eq!(rows.shape(), &[3, 16]);
    let uc = b.class_table().lookup(b.class_table().uncond_index()).unwrap();
    for i in 0..3 {
        assert!(rows.row(i).unwrap().bit_eq(&uc));
    }
    assert_eq!(set.new_classes(), 3);
}

#[test]
fn condition_requires_declared_channels() {
    let mut cfg = config();
    cfg.cond_channels = 0;
    let b = Backbone::<f64>::new(&cfg, 0).unwrap();
    assert!(AdapterSet::create(&b, "a", &AdapterSpec::affiner(2, 0).with_cond(true)).is_err());
    let b = backbone(0);
    let set = AdapterSet::create(&b, "a", &AdapterSpec::affiner(2, 0).with_cond(true)).unwrap();
    let c = set.cond.unwrap();
    assert_eq!(c.gate.item(), 0.0);
    assert_eq!(c.proj.shape(), &[16, 4]);
}

#[test]
fn duplicate_and_unknown_tasks() {
    let mut reg = Registry::new(backbone(0));
    reg.create_task("a", &AdapterSpec::affiner(2, 0)).unwrap();
    assert!(matches!(reg.create_task("a", &AdapterSpec::affiner(2, 0)), Err(Error::DuplicateTask(_))));
    assert!(matches!(reg.switch_task("zzz"), Err(Error::UnknownTask(_))));
    assert!(matches!(reg.get("zzz"), Err(Error::UnknownTask(_))));
    assert_eq!(reg.task_names(), vec!["a"]);
}

#[test]
fn composition_is_rejected() {
    let mut reg = Registry::new(backbone(0));
    reg.create_task("a", &AdapterSpec::affiner(2, 0)).unwrap();
    reg.create_task("b", &AdapterSpec::affiner(2, 1)).unwrap();
    assert!(matches!(reg.activate(&["a", "b"]), Err(Error::Composition(2))));
    reg.activate(&["b"]).unwrap();
    assert_eq!(reg.active_name(), Some("b"));
    reg.activate(&[]).unwrap();
    assert!(reg.active().is_none());
}

#[test]
fn switching_isolates_tasks() {
    let mut reg = Registry::new(backbone(1));
    let x = probe_input();
    let base = reg.denoise(&x, &[400], &[1], None, None).unwrap();
    reg.create_task("a", &AdapterSpec::affiner(2, 0)).unwrap();
    reg.create_task("b", &AdapterSpec::affiner(2, 1)).unwrap();
    let backbone_before = reg.backbone().fingerprint();
    let b_before = reg.get("b").unwrap().content_hash();

    train(&mut reg, "a", 5, 3);
    assert_eq!(reg.backbone().fingerprint(), backbone_before);
    assert_eq!(reg.get("b").unwrap().content_hash(), b_before);

    reg.switch_task("a").unwrap();
    let ya = reg.denoise(&x, &[400], &[1], None, None).unwrap();
    assert!(ya.max_abs_diff(&base) > 1e-9);
    reg.switch_task("b").unwrap();
    let yb = reg.denoise(&x, &[400], &[1], None, None).unwrap();
    assert!(yb.bit_eq(&base));
    reg.deactivate();
    assert!(reg.denoise(&x, &[400], &[1], None, None).unwrap().bit_eq(&base));
}

#[test]
fn sequential_and_isolated_training_agree() {
    let mut seq = Registry::new(backbone(2));
    seq.create_task("a", &AdapterSpec::affiner(2, 0)).unwrap();
    seq.create_task("b", &AdapterSpec::affiner(2, 1)).unwrap();
    train(&mut seq, "a", 3, 10);
    train(&mut seq, "b", 3, 11);

    let mut only_b = Registry::new(backbone(2));
    only_b.create_task("b", &AdapterSpec::affiner(2, 1)).unwrap();
    train(&mut only_b, "b", 3, 11);

    assert_eq!(seq.get("b").unwrap().content_hash(), only_b.get("b").unwrap().content_hash());
}

#[test]
fn adapter_round_trip_through_file() {
    let b = backbone(3);
    let dir = tempfile::tempdir().unwrap();
    let mut reg = Registry::new(b.clone());
    let spec = AdapterSpec::affiner(2, 5).with_classes(2).with_cond(true);
    reg.create_task("task", &spec).unwrap();
    train(&mut reg, "task", 2, 1);
    let set = reg.get("task").unwrap();
    let path = dir.path().join("task.afnr");
    save_adapter(set, &path).unwrap();
    let loaded: AdapterSet<f64> = load_adapter(&path, Some(&b)).unwrap();
    assert_eq!(loaded.origin, Origin::File);
    assert_eq!(loaded.task_name, "task");
    assert_eq!(loaded.content_hash(), set.content_hash());
    assert_eq!(write_adapter(&loaded), write_adapter(set));

    let x = probe_input();
    let c = Tensor::ones(vec![1, 4, 4, 1]);
    let y1 = b.denoise(&x, &[10], &[4], Some(&c), Some(set), None).unwrap();
    let y2 = b.denoise(&x, &[10], &[4], Some(&c), Some(&loaded), None).unwrap();
    assert!(y1.bit_eq(&y2));

    for method in [Method::Lora { rank: 3 }, Method::BiasOnly] {
        let s = AdapterSet::create(&b, "m", &AdapterSpec::affiner(1, 0).with_method(method)).unwrap();
        let back: AdapterSet<f64> = read_adapter(&write_adapter(&s)).unwrap();
        assert_eq!(back.content_hash(), s.content_hash());
    }
}

#[test]
fn f32_file_is_cast_on_read() {
    let b = Backbone::<f32>::new(&config(), 0).unwrap();
    let set = AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 0)).unwrap();
    let back: AdapterSet<f64> = read_adapter(&write_adapter(&set)).unwrap();
    let (name, orig) = &set.named_arrays()[3];
    let (name2, cast) = &back.named_arrays()[3];
    assert_eq!(name, name2);
    assert_eq!(cast.data()[0], orig.data()[0] as f64);
}

#[test]
fn corrupt_containers_are_rejected() {
    let b = backbone(4);
    let set = AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 0)).unwrap();
    let bytes = write_adapter(&set);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_adapter::<f64>(&bad), Err(Error::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4..6].copy_from_slice(&2u16.to_le_bytes());
    assert!(matches!(read_adapter::<f64>(&bad), Err(Error::UnsupportedVersion(2))));

    for cut in [3, 5, 20, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(read_adapter::<f64>(&bytes[..cut]), Err(Error::Truncated(_))),
            "cut at {cut}"
        );
    }

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(read_adapter::<f64>(&bad), Err(Error::Malformed(_))));
}

#[test]
fn foreign_backbone_is_rejected() {
    let b = backbone(5);
    let other = backbone(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.afnr");
    save_adapter(&AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 0)).unwrap(), &path).unwrap();
    assert!(matches!(
        load_adapter::<f64>(&path, Some(&other)),
        Err(Error::FingerprintMismatch { .. })
    ));
    let set = load_adapter::<f64>(&path, None).unwrap();
    let x = probe_input();
    assert!(matches!(
        other.denoise(&x, &[1], &[0], None, Some(&set), None),
        Err(Error::FingerprintMismatch { .. })
    ));
    let mut reg = Registry::new(other);
    assert!(matches!(reg.insert(set), Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn unknown_layer_is_rejected() {
    let b = backbone(5);
    let mut set = AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 0)).unwrap();
    let entry = set.entries.values().next().unwrap().clone();
    set.entries.insert("blocks.9.attn.q".into(), entry);
    assert!(matches!(set.check_binding(&b), Err(Error::UnknownLayer(_))));
}

#[test]
fn backbone_checkpoint_round_trip() {
    let b = backbone(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bb.afnr");
    save_backbone(&b, &path).unwrap();
    let back = load_backbone::<f64>(&path).unwrap();
    assert_eq!(back.fingerprint(), b.fingerprint());
    assert_eq!(back.config(), b.config());
    assert!(load_adapter::<f64>(&path, None).is_err());
}

#[test]
fn trainable_count_follows_parts() {
    let b = backbone(0);
    let full = AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 0)).unwrap();
    let shift = AdapterSet::create(&b, "t", &AdapterSpec::affiner(2, 0).with_parts(AffinerParts::SHIFT_ONLY)).unwrap();
    assert_eq!(full.trainable_count(), full.param_count());
    let m_total: usize = b.wrapped_layers().iter().map(|l| l.out_dim()).sum();
    assert_eq!(shift.trainable_count(), m_total);
}
