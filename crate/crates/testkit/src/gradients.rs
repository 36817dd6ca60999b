//! One finite-difference check per node kind and per loss graph, runnable as
//! a single suite.

use ncsl_core::models::{build_siamese, BlockKind, EncoderConfig, EncoderKind, HeadConfig, InputShape, ModelOptions, Variant};
use ncsl_diffcore::gradcheck::{grad_check, grad_check_plain};
use ncsl_diffcore::{GradCheck, GradCheckOptions, Graph, NodeId, Op, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    /// Check exercised a non-zero gradient and skipped few kinks.
    pub healthy: bool,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn case(name: &str, r: GradCheck) -> GradCase {
    let healthy = r.max_abs_analytic > 0.0 && r.kinks_skipped <= 1 + r.coords_checked / 10;
    GradCase { name: name.into(), max_rel_error: r.max_rel_error, healthy }
}

fn leaf(g: &mut Graph<f64>, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let p = g.add_param("x", random(shape, rng), true);
    g.param_node(p)
}

/// Scalar loss `mean(row_dot(flatten(out), r))` with random `r`.
fn project(g: &mut Graph<f64>, out: NodeId, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> (NodeId, Tensor<f64>) {
    let flat = g.flatten(out);
    let rin = g.input("r");
    let d = g.row_dot(flat, rin);
    (g.mean(d), random(&[rows, cols], rng))
}

fn plain(name: &str, g: &mut Graph<f64>, loss: NodeId, inputs: &[(&str, &Tensor<f64>)]) -> GradCase {
    case(name, grad_check_plain(g, inputs, loss, &GradCheckOptions::default()).expect(name))
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut out = Vec::new();

    let mut g = Graph::new();
    let w = g.add_param("w", random(&[4, 5], rng), true);
    let b = g.add_param("b", random(&[4], rng), true);
    let x = leaf(&mut g, &[3, 5], rng);
    let y = g.affine(x, w, Some(b));
    let (loss, r) = project(&mut g, y, 3, 4, rng);
    out.push(plain("affine", &mut g, loss, &[("r", &r)]));

    let mut g = Graph::new();
    let w = g.add_param("w", random(&[3, 2, 3, 3], rng), true);
    let x = leaf(&mut g, &[2, 2, 5, 6], rng);
    let y = g.conv2d(x, w, 2, 1);
    let (loss, r) = project(&mut g, y, 2, 3 * 3 * 3, rng);
    out.push(plain("conv2d", &mut g, loss, &[("r", &r)]));

    for (name, shape) in [("batch_norm_1d", vec![5, 3]), ("batch_norm_2d", vec![4, 3, 2, 3])] {
        let mut g = Graph::new();
        let gamma = g.add_param("gamma", random(&[3], rng), true);
        let beta = g.add_param("beta", random(&[3], rng), true);
        let s = g.add_stats("bn", 3);
        let x = leaf(&mut g, &shape, rng);
        let y = g.batch_norm(x, gamma, beta, s);
        let cols: usize = shape[1..].iter().product();
        let (loss, r) = project(&mut g, y, shape[0], cols, rng);
        out.push(plain(name, &mut g, loss, &[("r", &r)]));
    }

    let mut g = Graph::new();
    let x = leaf(&mut g, &[2, 2, 4, 4], rng);
    let a = g.relu(x);
    let p = g.max_pool2d(a, 2, 2);
    let (loss, r) = project(&mut g, p, 2, 2 * 2 * 2, rng);
    out.push(plain("relu_max_pool_flatten", &mut g, loss, &[("r", &r)]));

    let mut g = Graph::new();
    let x = leaf(&mut g, &[3, 2, 3, 3], rng);
    let y = g.global_avg_pool(x);
    let y = g.push(Op::Reshape(vec![3, 2]), &[y]);
    let (loss, r) = project(&mut g, y, 3, 2, rng);
    out.push(plain("global_avg_pool_reshape", &mut g, loss, &[("r", &r)]));

    let mut g = Graph::new();
    let a = leaf(&mut g, &[3, 4], rng);
    let pb = g.add_param("b", random(&[3, 4], rng), true);
    let bn = g.param_node(pb);
    let na = g.l2_normalize(a);
    let s = g.add(na, bn);
    let dot = g.row_dot(s, a);
    let m = g.mean(dot);
    let loss = g.scale(m, -1.7);
    out.push(plain("l2_normalize_row_dot_mean_add_scale", &mut g, loss, &[]));

    let mut g = Graph::new();
    let logits = leaf(&mut g, &[4, 3], rng);
    let pt = g.add_param("t", random(&[4, 3], rng), true);
    let target = g.param_node(pt);
    let labels = g.input("labels");
    let ce = g.push(Op::SoftmaxCrossEntropy, &[logits, labels]);
    let mse = g.push(Op::MseLoss, &[logits, target]);
    let loss = g.add(ce, mse);
    let lab = Tensor::new(vec![4], vec![0.0, 2.0, 1.0, 2.0]).unwrap();
    out.push(plain("mse_softmax_cross_entropy", &mut g, loss, &[("labels", &lab)]));
    out
}

const IN: InputShape = InputShape { channels: 2, height: 3, width: 3 };

fn loss_case(variant: Variant, kind: EncoderKind, rng: &mut ChaCha8Rng) -> GradCase {
    let enc = EncoderConfig { kind, depth: 2, width_multiplier: 0.125, repr_dim: 32, block: BlockKind::Basic };
    let heads = HeadConfig { projector: None, predictor_bottleneck: Some(24) };
    let opts = ModelOptions { queue_capacity: 4, ..Default::default() };
    let mut m = build_siamese::<f64>(&enc, &heads, variant, IN, &opts, 5).unwrap();
    let x1 = random(&[4, 2, 3, 3], rng);
    let x2 = random(&[4, 2, 3, 3], rng);
    if variant == Variant::Nnsiam {
        // fill the queue so the nearest-neighbour branch is active
        let p = m.forward(&x1, &x2).unwrap();
        m.after_step(&p).unwrap();
    }
    let loss = m.nodes().loss;
    let (g, mut hook) = m.split_mut();
    let o = GradCheckOptions { max_coords: 4000, ..Default::default() };
    let name = format!("{}_{}_loss", variant.name(), if kind == EncoderKind::Mlp { "mlp" } else { "conv" });
    case(&name, grad_check(g, &[("x1", &x1), ("x2", &x2)], loss, &o, &mut hook).expect("loss graph check"))
}

/// Every node kind and every siamese loss graph against central differences.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = layer_cases(&mut rng);
    for (v, k) in [
        (Variant::Simsiam, EncoderKind::Mlp),
        (Variant::Simsiam, EncoderKind::Conv),
        (Variant::Byol, EncoderKind::Mlp),
        (Variant::Byol, EncoderKind::Conv),
        (Variant::Nnsiam, EncoderKind::Mlp),
    ] {
        out.push(loss_case(v, k, &mut rng));
    }
    out
}

/// Gradients that must be exactly zero: a parameter reached only through a
/// stop-gradient, and every BYOL target parameter. Returns offending names.
pub fn stop_grad_violations(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();

    let mut g = Graph::<f64>::new();
    let pa = g.add_param("live", random(&[3, 4], &mut rng), true);
    let pz = g.add_param("frozen", random(&[3, 4], &mut rng), true);
    let (a, z) = (g.param_node(pa), g.param_node(pz));
    let sz = g.stop_grad(z);
    let d = g.row_dot(a, sz);
    let loss = g.mean(d);
    g.evaluate(&[], &[loss], ncsl_diffcore::Mode::Train).unwrap();
    g.backward(loss).unwrap();
    if g.param(pz).grad.data().iter().any(|&v| v != 0.0) {
        bad.push("frozen".into());
    }
    if g.param(pa).grad.data().iter().all(|&v| v == 0.0) {
        bad.push("live (no gradient at all)".into());
    }

    for variant in [Variant::Simsiam, Variant::Byol, Variant::Nnsiam] {
        let enc = EncoderConfig { kind: EncoderKind::Conv, depth: 2, width_multiplier: 0.125, repr_dim: 32, block: BlockKind::Basic };
        let heads = HeadConfig { projector: None, predictor_bottleneck: Some(24) };
        let opts = ModelOptions { queue_capacity: 4, ..Default::default() };
        let mut m = build_siamese::<f64>(&enc, &heads, variant, IN, &opts, 2).unwrap();
        let (x1, x2) = (random(&[5, 2, 3, 3], &mut rng), random(&[5, 2, 3, 3], &mut rng));
        m.forward(&x1, &x2).unwrap();
        m.backward().unwrap();
        for p in m.graph().params() {
            if !p.requires_grad && p.grad.data().iter().any(|&v| v != 0.0) {
                bad.push(format!("{}: {}", variant.name(), p.name));
            }
        }
    }
    bad
}
