use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::nn::{Ctx, LinearLayer};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn dense(w: Tensor<f64>, b: Tensor<f64>) -> LinearLayer<f64> {
    LinearLayer::dense("l", w, b).unwrap()
}

fn random_layer(m: usize, n: usize, r: &mut ChaCha8Rng) -> LinearLayer<f64> {
    dense(Tensor::randn(vec![m, n], 1.0, r), Tensor::randn(vec![m], 1.0, r))
}

fn random_params(m: usize, n: usize, d: usize, r: &mut ChaCha8Rng) -> AffinerParams<f64> {
    AffinerParams {
        a: Tensor::randn(vec![m], 0.5, r),
        b: Tensor::randn(vec![m], 0.5, r),
        s: Tensor::scalar(r.random_range(-1.0..1.0)),
        w_down: Tensor::randn(vec![d, n], 1.0, r),
        w_up: Tensor::randn(vec![m, d], 1.0, r),
    }
}

fn affine_out(layer: &LinearLayer<f64>, p: &AffinerParams<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let xv = tape.constant(x.clone());
    (*affiner_forward(&ctx, layer, p, xv).unwrap().value()).clone()
}

fn linear_out(layer: &LinearLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    (*layer.forward(&ctx, tape.constant(x.clone())).unwrap().value()).clone()
}

/// Direct loop evaluation of the Affiner expression for one input vector.
fn oracle(layer: &LinearLayer<f64>, p: &AffinerParams<f64>, x: &[f64]) -> Vec<f64> {
    let (m, n) = layer.weight.dims2().unwrap();
    let d = p.rank();
    let w = layer.weight.data();
    let hidden: Vec<f64> = (0..d)
        .map(|k| (0..n).map(|j| p.w_down.data()[k * n + j] * x[j]).sum::<f64>().max(0.0))
        .collect();
    (0..m)
        .map(|i| {
            let wx: f64 = (0..n).map(|j| w[i * n + j] * x[j]).sum();
            let branch: f64 = (0..d).map(|k| p.w_up.data()[i * d + k] * hidden[k]).sum();
            (1.0 + p.a.data()[i]) * wx + p.s.item() * branch + layer.bias.data()[i] + p.b.data()[i]
        })
        .collect()
}

#[test]
fn fresh_params_are_identity_bit_exact() {
    let mut r = rng(0);
    for _ in 0..100 {
        let (m, n) = (r.random_range(1..12), r.random_range(1..12));
        let layer = random_layer(m, n, &mut r);
        let p = AffinerParams::init(m, n, r.random_range(1..4), r.random()).unwrap();
        let x = Tensor::randn(vec![3, n], 2.0, &mut r);
        assert!(affine_out(&layer, &p, &x).bit_eq(&linear_out(&layer, &x)));
    }
}

#[test]
fn scale_example() {
    let layer = dense(Tensor::eye(2), Tensor::zeros(vec![2]));
    let mut p = AffinerParams::init(2, 2, 1, 0).unwrap();
    p.a = t(&[2], &[1.0, 1.0]);
    let y = affine_out(&layer, &p, &t(&[2], &[2.0, 3.0]));
    assert_eq!(y.data(), &[4.0, 6.0]);
    assert_eq!(oracle(&layer, &p, &[2.0, 3.0]), vec![4.0, 6.0]);
}

#[test]
fn branch_example() {
    let layer = dense(Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2]));
    let p = AffinerParams {
        a: Tensor::zeros(vec![2]),
        b: Tensor::zeros(vec![2]),
        s: Tensor::scalar(1.0),
        w_down: Tensor::eye(2),
        w_up: Tensor::eye(2),
    };
    let y = affine_out(&layer, &p, &t(&[2], &[-1.0, 2.0]));
    assert_eq!(y.data(), &[0.0, 2.0]);
}

#[test]
fn forward_matches_loop_oracle() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (m, n, d) = (r.random_range(2..10), r.random_range(2..10), r.random_range(1..5));
        let layer = random_layer(m, n, &mut r);
        let p = random_params(m, n, d, &mut r);
        let x = Tensor::randn(vec![n], 1.0, &mut r);
        let y = affine_out(&layer, &p, &x);
        let expect = oracle(&layer, &p, x.data());
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    let layer = random_layer(3, 4, &mut rng(2));
    let p = AffinerParams::<f64>::init(3, 5, 2, 0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let x = tape.constant(Tensor::zeros(vec![4]));
    assert!(matches!(affiner_forward(&ctx, &layer, &p, x), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_output_names_the_layer() {
    let layer = LinearLayer::dense("blocks.3.attn.q", Tensor::full(vec![1, 1], f64::MAX), Tensor::zeros(vec![1])).unwrap();
    let mut p = AffinerParams::init(1, 1, 1, 0).unwrap();
    p.a = t(&[1], &[1.0]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let x = tape.constant(t(&[1], &[1.0]));
    match affiner_forward(&ctx, &layer, &p, x) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("blocks.3.attn.q"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn init_is_zero_and_deterministic() {
    let p1 = AffinerParams::<f32>::init(4, 4, 2, 1).unwrap();
    let p2 = AffinerParams::<f32>::init(4, 4, 2, 1).unwrap();
    assert!(p1.w_down.bit_eq(&p2.w_down) && p1.w_up.bit_eq(&p2.w_up));
    assert!(p1.a.data().iter().chain(p1.b.data()).all(|&v| v == 0.0));
    assert_eq!(p1.gate(), 0.0);
    assert!(p1.w_down.data().iter().any(|&v| v != 0.0));
    assert!(AffinerParams::<f32>::init(4, 0, 2, 1).is_err());
}

#[test]
fn kaiming_variance_of_w_down() {
    let p = AffinerParams::<f64>::init(16, 512, 64, 7).unwrap();
    let data = p.w_down.data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (data.len() - 1) as f64;
    let target = 2.0 / 512.0;
    assert!((var / target - 1.0).abs() < 0.2, "variance {var} vs {target}");
}

#[test]
fn gradient_fidelity_all_groups() {
    let mut r = rng(3);
    for _ in 0..20 {
        let (m, n, d) = (r.random_range(2..=16), r.random_range(2..=16), r.random_range(2..=16));
        let layer = random_layer(m, n, &mut r);
        let p = random_params(m, n, d, &mut r);
        let x = Tensor::randn(vec![3, n], 1.0, &mut r);
        let target = Tensor::randn(vec![3, m], 1.0, &mut r);
        let params = [p.a, p.b, p.s, p.w_down, p.w_up];
        let report = grad_check(
            |tape, v| {
                let vars = AffinerVars {
                    a: v[0],
                    b: v[1],
                    s: v[2],
                    w_down: v[3],
                    w_up: v[4],
                };
                let w = tape.constant(layer.weight.clone());
                let bias = tape.constant(layer.bias.clone());
                let y = affiner_apply(LayerKind::Dense, w, bias, vars, tape.constant(x.clone()), false)?;
                let diff = y.sub(tape.constant(target.clone()))?;
                diff.mul(diff)?.mean()
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn gate_gradient_is_nonzero_at_init() {
    let mut r = rng(4);
    let layer = random_layer(6, 5, &mut r);
    let p = AffinerParams::<f64>::init(6, 5, 3, 9).unwrap();
    let x = Tensor::randn(vec![4, 5], 1.0, &mut r);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape).training(crate::nn::Trainable::Adapters);
    let y = affiner_forward(&ctx, &layer, &p, tape.constant(x)).unwrap();
    let loss = y.sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    let s = ctx
        .bindings()
        .into_iter()
        .find(|(k, _)| *k == crate::nn::ParamKey::Adapter("l::s".into()))
        .unwrap()
        .1;
    assert!(grads.get(s).unwrap().item().abs() > 1e-8);
}

#[test]
fn lora_and_bias_only_start_as_identity() {
    let mut r = rng(5);
    let layer = random_layer(4, 3, &mut r);
    let x = Tensor::randn(vec![2, 3], 1.0, &mut r);
    let base = linear_out(&layer, &x);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let lora = LoraParams::init(4, 3, 2, 1).unwrap();
    let y = lora_forward(&ctx, &layer, &lora, tape.constant(x.clone())).unwrap();
    assert!(y.value().bit_eq(&base));
    let bias = BiasParams::init(4);
    let y = bias_only_forward(&ctx, &layer, &bias, tape.constant(x)).unwrap();
    assert!(y.value().bit_eq(&base));
}

#[test]
fn lora_hand_value() {
    let layer = dense(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), t(&[2], &[0.5, -0.5]));
    let p = LoraParams {
        a: Tensor::ones(vec![2, 1]),
        b: t(&[1, 2], &[2.0, 3.0]),
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let y = lora_forward(&ctx, &layer, &p, tape.constant(t(&[2], &[1.0, 1.0]))).unwrap();
    // W x + b̂ = [1.5, 0.5]; A (B x) = [5, 5]
    assert_eq!(y.value().data(), &[6.5, 5.5]);
}

#[test]
fn bias_only_adds_delta() {
    let layer = dense(Tensor::eye(2), Tensor::zeros(vec![2]));
    let p = BiasParams { delta: t(&[2], &[1.0, -2.0]) };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let y = bias_only_forward(&ctx, &layer, &p, tape.constant(t(&[2], &[3.0, 4.0]))).unwrap();
    assert_eq!(y.value().data(), &[4.0, 2.0]);
}

#[test]
fn fold_with_zero_affine_is_bit_exact() {
    let mut r = rng(6);
    let layer = random_layer(5, 4, &mut r);
    let p = AffinerParams::<f64>::init(5, 4, 2, 0).unwrap();
    let f = fold_affine(&layer, &p).unwrap();
    assert!(f.weight.bit_eq(&layer.weight));
    assert!(f.bias.bit_eq(&layer.bias));
}

#[test]
fn fold_with_dead_branch_matches_folded_only() {
    let mut r = rng(7);
    let layer = random_layer(5, 4, &mut r);
    let mut p = random_params(5, 4, 3, &mut r);
    p.s = Tensor::scalar(0.0);
    let f = fold_affine(&layer, &p).unwrap();
    let x = Tensor::randn(vec![4], 1.0, &mut r);
    let tape = Tape::new();
    let folded = f.forward_folded(&tape, tape.constant(x.clone())).unwrap();
    let full = affine_out(&layer, &p, &x);
    assert!(folded.value().max_abs_diff(&full) < 1e-6);
}

#[test]
fn fold_equivalence_random() {
    let mut r = rng(8);
    for _ in 0..100 {
        let (m, n, d) = (r.random_range(2..12), r.random_range(2..12), r.random_range(1..6));
        let layer = random_layer(m, n, &mut r);
        let p = random_params(m, n, d, &mut r);
        let f = fold_affine(&layer, &p).unwrap();
        let x = Tensor::randn(vec![n], 1.0, &mut r);
        let tape = Tape::new();
        let y = f.forward(&tape, tape.constant(x.clone())).unwrap();
        let expect = affine_out(&layer, &p, &x);
        for (a, b) in y.value().data().iter().zip(expect.data()) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-5);
        }
    }
}

#[test]
fn count_single_layer() {
    let model = ParamCountModel {
        layers: vec![LayerShape {
            id: "l".into(),
            m: 4,
            n: 4,
            role: LayerRole::Projection,
        }],
        backbone_total: 20,
    };
    let affiner = |rank| CountMethod::Affiner {
        rank,
        parts: AffinerParts::FULL,
    };
    assert_eq!(count_params(&model, affiner(2)), 25);
    assert_eq!(count_params(&model, affiner(0)), 9);
    assert_eq!(AffinerParams::<f32>::init(4, 4, 2, 0).unwrap().param_count(), 25);
    assert_eq!(count_params(&model, CountMethod::Lora { rank: 3 }), 24);
    assert_eq!(count_params(&model, CountMethod::BiasOnly), 4);
}

#[test]
fn fraction_examples() {
    let f = trainable_fraction(99_000_000, 1_000_000).unwrap();
    assert!((f.of_total - 1.0).abs() < 1e-12);
    assert!((f.of_backbone - 100.0 / 99.0).abs() < 1e-12);
    assert_eq!(trainable_fraction(10, 0).unwrap().of_total, 0.0);
    assert!(trainable_fraction(0, 1).is_err());
}

#[test]
fn parts_names_round_trip() {
    for p in [AffinerParts::FULL, AffinerParts::SHIFT_ONLY, AffinerParts::SCALE_ONLY, AffinerParts::BRANCH_ONLY] {
        assert_eq!(AffinerParts::from_name(p.name()), Some(p));
        assert_eq!(AffinerParts::from_bits(p.bits()), p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_matches_enumeration(m in 1usize..40, n in 1usize..40, d in 1usize..8) {
        let p = AffinerParams::<f32>::init(m, n, d, 0).unwrap();
        let model = ParamCountModel {
            layers: vec![LayerShape { id: "x".into(), m, n, role: LayerRole::Mlp }],
            backbone_total: m * n + m,
        };
        let closed = count_params(&model, CountMethod::Affiner { rank: d, parts: AffinerParts::FULL });
        prop_assert_eq!(closed, p.param_count());
        prop_assert_eq!(closed, 2 * m + 1 + d * (m + n));
    }

    #[test]
    fn identity_at_init_for_any_input(seed in any::<u64>(), m in 1usize..8, n in 1usize..8) {
        let mut r = rng(seed);
        let layer = random_layer(m, n, &mut r);
        let p = AffinerParams::init(m, n, 2, seed).unwrap();
        let x = Tensor::randn(vec![n], 3.0, &mut r);
        prop_assert!(affine_out(&layer, &p, &x).bit_eq(&linear_out(&layer, &x)));
    }
}
