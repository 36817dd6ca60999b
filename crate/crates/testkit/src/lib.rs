//! Reference implementations written independently of the library code,
//! plus small fixtures. Used only by tests.

mod gradients;

pub use gradients::{gradient_suite, stop_grad_violations, GradCase};

use std::path::Path;

use ncsl_core::config::RunConfig;
use ncsl_core::datapipe::{build_schedule, Dataset, Eligible, OrderingMode, OrderingPlan, Split, SyntheticSpec};
use ncsl_core::diagnostics::{ReprMatrix, ReprMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major `n x d` standard-normal matrix.
pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Eigenvalues of a symmetric `n x n` matrix by cyclic Jacobi rotations,
/// sorted descending.
pub fn jacobi_eigenvalues(sym: &[f64], n: usize) -> Vec<f64> {
    let mut a = sym.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i].powi(2)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix,
/// zero-padded to `d`.
pub fn gram_singular_values(data: &[f64], n: usize, d: usize, center: bool) -> Vec<f64> {
    let mut m = data.to_vec();
    if center {
        for j in 0..d {
            let mean = (0..n).map(|i| m[i * d + j]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| m[i * d + j] -= mean);
        }
    }
    let (k, gram) = if n >= d {
        let mut g = vec![0.0; d * d];
        for i in 0..n {
            let row = &m[i * d..(i + 1) * d];
            for a in 0..d {
                for b in 0..d {
                    g[a * d + b] += row[a] * row[b];
                }
            }
        }
        (d, g)
    } else {
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = (0..d).map(|j| m[a * d + j] * m[b * d + j]).sum();
            }
        }
        (n, g)
    };
    let mut s: Vec<f64> = jacobi_eigenvalues(&gram, k).into_iter().map(|l| l.max(0.0).sqrt()).collect();
    s.resize(d, 0.0);
    s
}

pub fn repr(n: usize, d: usize, data: &[f64]) -> ReprMatrix {
    ReprMatrix::new(n, d, data.iter().map(|&v| v as f32).collect(), ReprMeta::default()).unwrap()
}

/// Exhaustive cosine k-NN: every pairwise similarity, full sort, vote by
/// count, then summed similarity, then lowest label.
pub fn brute_force_knn(train: &[Vec<f64>], labels: &[u32], query: &[f64], k: usize) -> u32 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut sims: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(j, t)| (t.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (norm(t) * qn), j))
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut best: Option<(u32, usize, f64)> = None;
    let max_label = *labels.iter().max().unwrap();
    for l in 0..=max_label {
        let mine: Vec<f64> = sims[..k].iter().filter(|s| labels[s.1] == l).map(|s| s.0).collect();
        if mine.is_empty() {
            continue;
        }
        let (count, total) = (mine.len(), mine.iter().sum::<f64>());
        let better = match best {
            None => true,
            Some((_, c, t)) => count > c || (count == c && total > t),
        };
        if better {
            best = Some((l, count, total));
        }
    }
    best.unwrap().0
}

/// Writes a synthetic dataset spec and returns its path.
pub fn write_synthetic_spec(dir: &Path, n: usize, classes: usize, side: usize, seed: u64) -> std::path::PathBuf {
    let spec = format!("n = {n}\nclasses = {classes}\nimage_size = {side}\nseed = {seed}\n");
    let path = dir.join("synthetic.toml");
    std::fs::write(&path, spec).unwrap();
    path
}

pub fn synthetic(n: usize, classes: usize, side: usize, seed: u64, split: Split) -> Dataset {
    SyntheticSpec { n, classes, image_size: side, seed, channels: 3, n_val: None }.generate(split).unwrap()
}

/// A small mlp run on a synthetic dataset written under `dir`.
pub fn tiny_config(dir: &Path, variant: &str, mode: &str, total_steps: usize, batch: usize) -> RunConfig {
    let spec = write_synthetic_spec(dir, 128, 4, 8, 11);
    let text = format!(
        r#"
seed = 7
output_dir = "{out}"
variant = "{variant}"
base_lr = 0.05
log_every = 5

[dataset]
format = "synthetic-spec"
path = "{spec}"

[encoder]
kind = "mlp"
depth = 2
width_multiplier = 0.25
repr_dim = 32

[heads]
predictor_bottleneck = 16

[model]
queue_capacity = 64

[ordering]
mode = "{mode}"
total_steps = {total_steps}
batch_size = {batch}
num_chunks = 4

[eval]
batch_size = 32
k_candidates = [1, 5, 20]

[eval.probe]
epochs = 3
batch_size = 32
"#,
        out = dir.join("run").display(),
        spec = spec.display(),
    );
    RunConfig::from_toml_str(&text).unwrap()
}

/// Checks the ordering invariants for one seed: single-pass retirement,
/// cumulative monotone eligibility, the hybrid switch step and the exact
/// batch budget. Returns a description of the first violation.
pub fn check_schedule_invariants(seed: u64, t: usize, c: usize, n: usize, b: usize, k: usize) -> Result<(), String> {
    let plan = |mode, switch| OrderingPlan { mode, total_steps: t, batch_size: b, num_chunks: c, switch_chunk: switch, seed };
    let s_chunk = t / c;
    for (mode, switch) in [
        (OrderingMode::MultiplePass, None),
        (OrderingMode::SinglePass, None),
        (OrderingMode::Cumulative, None),
        (OrderingMode::Hybrid, Some(k)),
    ] {
        let s = build_schedule(&plan(mode, switch), n).map_err(|e| e.to_string())?;
        // partition
        if mode != OrderingMode::MultiplePass {
            let mut all: Vec<usize> = s.chunks.concat();
            all.sort_unstable();
            if all != (0..n).collect::<Vec<_>>() {
                return Err(format!("{mode:?}: chunks do not partition the dataset"));
            }
        }
        let mut batches = 0;
        let mut seen_retired = vec![false; n];
        let mut prev_eligible: Vec<usize> = Vec::new();
        for step in 0..t {
            let batch = s.next_batch(step).map_err(|e| e.to_string())?;
            batches += 1;
            if batch.len() != b {
                return Err(format!("{mode:?}: batch of {} at step {step}", batch.len()));
            }
            let mut eligible = s.eligible_at(step).map_err(|e| e.to_string())?;
            eligible.sort_unstable();
            if let Some(x) = batch.iter().find(|x| eligible.binary_search(x).is_err()) {
                return Err(format!("{mode:?}: index {x} drawn outside the eligible set at step {step}"));
            }
            let j = step / s_chunk;
            match mode {
                OrderingMode::SinglePass => {
                    let mut want = s.chunks[j].clone();
                    want.sort_unstable();
                    if eligible != want {
                        return Err(format!("single_pass: step {step} not restricted to chunk {j}"));
                    }
                    // retirement: indices of earlier chunks never reappear
                    if batch.iter().any(|&x| seen_retired[x]) {
                        return Err(format!("single_pass: retired index resampled at step {step}"));
                    }
                    if (step + 1) % s_chunk == 0 {
                        s.chunks[j].iter().for_each(|&x| seen_retired[x] = true);
                    }
                }
                OrderingMode::Cumulative => {
                    if prev_eligible.iter().any(|x| eligible.binary_search(x).is_err()) {
                        return Err(format!("cumulative: eligibility shrank at step {step}"));
                    }
                    if eligible.len() != s.chunks[..=j].iter().map(Vec::len).sum::<usize>() {
                        return Err(format!("cumulative: wrong prefix size at step {step}"));
                    }
                }
                OrderingMode::Hybrid => {
                    let full = eligible.len() == n;
                    if full != (step >= k * s_chunk) {
                        return Err(format!("hybrid: full-set phase {} at step {step}, switch at {}", full, k * s_chunk));
                    }
                    if !full && s.phase(step).map_err(|e| e.to_string())?.eligible != Eligible::Chunk(j) {
                        return Err(format!("hybrid: step {step} not on chunk {j}"));
                    }
                }
                OrderingMode::MultiplePass => {
                    if eligible.len() != n {
                        return Err("multiple_pass: eligible set is not the full dataset".into());
                    }
                }
            }
            prev_eligible = eligible;
        }
        if batches != t || s.next_batch(t).is_ok() {
            return Err(format!("{mode:?}: budget is not exactly {t} batches"));
        }
    }
    Ok(())
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
