use ncsl_core::models::*;
use ncsl_diffcore::gradcheck::grad_check;
use ncsl_diffcore::{GradCheckOptions, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IN: InputShape = InputShape { channels: 2, height: 3, width: 3 };

fn tiny(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig { kind, depth: 2, width_multiplier: 0.125, repr_dim: 32, block: BlockKind::Basic }
}

// A wide bottleneck keeps every predictor row away from the all-zero ReLU
// pattern, which would make the cosine undefined.
fn heads() -> HeadConfig {
    HeadConfig { projector: None, predictor_bottleneck: Some(24) }
}

fn views(seed: u64, b: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = b * IN.numel();
    let mut draw = || Tensor::new(vec![b, 2, 3, 3], (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    (draw(), draw())
}

fn check_gradients(variant: Variant, kind: EncoderKind) -> f64 {
    let opts = ModelOptions { queue_capacity: 4, ..Default::default() };
    let mut m = build_siamese::<f64>(&tiny(kind), &heads(), variant, IN, &opts, 5).unwrap();
    let (x1, x2) = views(11, 4);
    if variant == Variant::Nnsiam {
        let p = m.forward(&x1, &x2).unwrap();
        m.after_step(&p).unwrap();
    }
    let loss = m.nodes().loss;
    let (g, mut hook) = m.split_mut();
    let opts = GradCheckOptions { max_coords: 4000, ..Default::default() };
    let r = grad_check(g, &[("x1", &x1), ("x2", &x2)], loss, &opts, &mut hook).unwrap();
    assert!(r.max_abs_analytic > 0.0);
    assert!(r.kinks_skipped * 100 <= r.coords_checked, "{r:?}");
    r.max_rel_error
}

#[test]
fn simsiam_gradients_match_finite_differences() {
    for kind in [EncoderKind::Mlp, EncoderKind::Conv] {
        let e = check_gradients(Variant::Simsiam, kind);
        assert!(e < 1e-4, "{kind:?}: relative error {e}");
    }
}

#[test]
fn byol_and_nnsiam_gradients_match_finite_differences() {
    for v in [Variant::Byol, Variant::Nnsiam] {
        let e = check_gradients(v, EncoderKind::Mlp);
        assert!(e < 1e-4, "{v:?}: relative error {e}");
    }
}

#[test]
fn byol_target_gradients_stay_zero() {
    let mut m = build_siamese::<f64>(&tiny(EncoderKind::Conv), &heads(), Variant::Byol, IN, &ModelOptions::default(), 2).unwrap();
    let (x1, x2) = views(3, 5);
    m.forward(&x1, &x2).unwrap();
    m.backward().unwrap();
    let mut targets = 0;
    for p in m.graph().params() {
        if p.name.starts_with("target.") {
            targets += 1;
            assert!(p.grad.data().iter().all(|&g| g == 0.0), "{} received gradient", p.name);
        }
    }
    assert!(targets > 0);
    assert!(m.graph().params().iter().any(|p| p.grad.data().iter().any(|&g| g != 0.0)));
}

#[test]
fn nnsiam_with_queue_of_z2_reduces_to_simsiam() {
    let b = 6;
    let opts = ModelOptions { queue_capacity: b, ..Default::default() };
    let enc = tiny(EncoderKind::Mlp);
    let mut sim = build_siamese::<f64>(&enc, &heads(), Variant::Simsiam, IN, &opts, 8).unwrap();
    let mut nn = build_siamese::<f64>(&enc, &heads(), Variant::Nnsiam, IN, &opts, 8).unwrap();
    let (x1, x2) = views(4, b);

    let s = sim.forward(&x1, &x2).unwrap();
    nn.queue.as_mut().unwrap().push_rows(&s.z2).unwrap();
    let n = nn.forward(&x1, &x2).unwrap();
    assert!((n.term1 - s.term1).abs() < 1e-12, "{} vs {}", n.term1, s.term1);

    // with identical views z1 = z2, so both terms reduce
    let s = sim.forward(&x1, &x1).unwrap();
    let mut q = ncsl_core::queue::NNQueue::new(b, s.z2.shape()[1]).unwrap();
    q.push_rows(&s.z2).unwrap();
    nn.queue = Some(q);
    let n = nn.forward(&x1, &x1).unwrap();
    assert!((n.loss - s.loss).abs() < 1e-12, "{} vs {}", n.loss, s.loss);
}

#[test]
fn nnsiam_falls_back_to_own_projection_before_queue_fills() {
    let opts = ModelOptions { queue_capacity: 64, ..Default::default() };
    let enc = tiny(EncoderKind::Mlp);
    let mut sim = build_siamese::<f64>(&enc, &heads(), Variant::Simsiam, IN, &opts, 8).unwrap();
    let mut nn = build_siamese::<f64>(&enc, &heads(), Variant::Nnsiam, IN, &opts, 8).unwrap();
    let (x1, x2) = views(4, 5);
    let a = nn.forward(&x1, &x2).unwrap();
    nn.after_step(&a).unwrap();
    assert_eq!(nn.queue.as_ref().unwrap().len(), 10);
    let b = nn.forward(&x1, &x2).unwrap();
    let s = sim.forward(&x1, &x2).unwrap();
    assert_eq!(b.loss, s.loss);
}

fn conv_encoder_params(enc: &EncoderConfig, in_ch: usize) -> usize {
    let c0 = (32.0 * enc.width_multiplier).round() as usize;
    let mut total = 9 * in_ch * c0 + 2 * c0;
    let mut prev = c0;
    for i in 0..enc.depth {
        let out = if i + 1 == enc.depth { enc.repr_dim } else { c0 * (1 << i.min(2)) };
        let stride = if (1..=3).contains(&i) { 2 } else { 1 };
        total += 9 * prev * out + 2 * out + 9 * out * out + 2 * out;
        if stride != 1 || prev != out {
            total += prev * out + 2 * out;
        }
        prev = out;
    }
    total
}

#[test]
fn conv_parameter_counts_match_layer_dims() {
    let shape = InputShape { channels: 3, height: 8, width: 8 };
    let mut counts = Vec::new();
    for w in [1.0, 2.0] {
        let enc = EncoderConfig { kind: EncoderKind::Conv, depth: 4, width_multiplier: w, repr_dim: 64, block: BlockKind::Basic };
        let m = build_siamese::<f32>(&enc, &HeadConfig::default(), Variant::Simsiam, shape, &ModelOptions::default(), 0).unwrap();
        assert_eq!(m.encoder_param_count(), conv_encoder_params(&enc, 3));
        counts.push(m.param_count());
    }
    assert!(counts[1] > counts[0]);
}

#[test]
fn bottleneck_blocks_expand_channels_fourfold() {
    let shape = InputShape { channels: 3, height: 8, width: 8 };
    let enc = EncoderConfig { kind: EncoderKind::Conv, depth: 2, width_multiplier: 0.25, repr_dim: 16, block: BlockKind::Bottleneck };
    let m = build_siamese::<f32>(&enc, &HeadConfig::default(), Variant::Simsiam, shape, &ModelOptions::default(), 0).unwrap();
    let conv3 = m.graph().params().iter().find(|p| p.name == "enc.b0.conv3.w").unwrap();
    assert_eq!(conv3.value.shape()[0], 4 * enc.nominal_channels(0));
    let x = Tensor::<f32>::zeros(&[2, 3, 8, 8]);
    assert_eq!(m.represent(&x).unwrap().shape(), &[2, 16]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loss_is_symmetric_and_bounded(seed in any::<u64>(), b in 2usize..6, conv in any::<bool>()) {
        let kind = if conv { EncoderKind::Conv } else { EncoderKind::Mlp };
        let mut m = build_siamese::<f64>(&tiny(kind), &heads(), Variant::Simsiam, IN, &ModelOptions::default(), seed).unwrap();
        let (x1, x2) = views(seed, b);
        let a = m.forward(&x1, &x2).unwrap();
        let s = m.forward(&x2, &x1).unwrap();
        prop_assert!((a.loss - s.loss).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a.loss));
    }

    #[test]
    fn parameter_count_increases_with_depth_and_width(kind_conv in any::<bool>(), bottleneck in any::<bool>(), depth in 1usize..6, w32 in 4usize..40, repr in 8usize..40) {
        let kind = if kind_conv { EncoderKind::Conv } else { EncoderKind::Mlp };
        let block = if bottleneck { BlockKind::Bottleneck } else { BlockKind::Basic };
        let shape = InputShape { channels: 3, height: 4, width: 4 };
        let count = |depth: usize, w32: usize| {
            let enc = EncoderConfig { kind, depth, width_multiplier: w32 as f64 / 32.0, repr_dim: repr, block };
            build_siamese::<f32>(&enc, &HeadConfig::default(), Variant::Simsiam, shape, &ModelOptions::default(), 0).unwrap().encoder_param_count()
        };
        let base = count(depth, w32);
        prop_assert!(count(depth + 1, w32) > base);
        prop_assert!(count(depth, w32 + 1) > base);
    }
}
