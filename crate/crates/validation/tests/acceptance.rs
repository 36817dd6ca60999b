//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5 to 8 and the first half of 10 train on CIFAR-10. They look for
//! the binary batches in `$NCSL_CIFAR10_DIR`, falling back to
//! `data/cifar-10-batches-bin` under the workspace root, and fail with an
//! explanation when the data is absent. Their runs go to
//! `$NCSL_ACCEPTANCE_DIR` (default `target/acceptance`); finished runs are
//! reused on the next invocation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DMatrix;
use ncsl::pipeline::{evaluate_backbone, EvalData};
use ncsl::sweep::{run_sweep, SweepConfig};
use ncsl_core::config::RunConfig;
use ncsl_core::diagnostics::{collapse_auc, collapse_report, per_dim_std, spectrum_of, Spectrum};
use ncsl_core::distill::{load_student, OnlineNormalizer};
use ncsl_core::eval::{fit_predictor_report, knn_predict, LossFeature, ModelRecord};
use ncsl_core::models::{build_siamese, EncoderConfig};
use ncsl_core::trainer::read_metrics;
use ncsl_diffcore::Tensor;
use ncsl_testkit::{
    brute_force_knn, check_schedule_invariants, gaussian, gradient_suite, gram_singular_values, repr, rng, stop_grad_violations,
    tiny_config,
};
use ncsl_validation::ncsl_exe;
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- 1 ---------------------------------------------------------------------

fn gradients() -> Outcome {
    let cases = gradient_suite(2024);
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    if let Some(c) = cases.iter().find(|c| !c.healthy || !(c.max_rel_error < 1e-4)) {
        return Err(format!("{}: max relative error {:.2e} (healthy: {})", c.name, c.max_rel_error, c.healthy));
    }
    let leaks = stop_grad_violations(2024);
    ensure(leaks.is_empty(), || format!("non-zero gradient behind stop-grad: {leaks:?}"))?;
    Ok(format!("{} checks, worst relative error {worst:.2e}; stop-grad and target gradients exactly zero", cases.len()))
}

// ---- 2 ---------------------------------------------------------------------

fn spectrum_oracle() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (n, d) = if case == 0 { (512, 128) } else { (r.random_range(2..=512), r.random_range(1..=128)) };
        let data = gaussian(&mut r, n, d);
        let center = case % 2 == 1;
        let got = spectrum_of(&DMatrix::from_row_slice(n, d, &data), center).map_err(|e| e.to_string())?.values;
        let want = gram_singular_values(&data, n, d, center);
        for (g, w) in got.iter().zip(&want) {
            let scale = if *w > 1e-6 * want[0] { *w } else { want[0] };
            worst = worst.max((g - w).abs() / scale);
        }
    }
    ensure(worst <= 1e-8, || format!("relative deviation {worst:.2e} from the Gram oracle"))?;
    let mut one = vec![0.0; 128];
    one[0] = 1.0;
    let a1 = collapse_auc(&Spectrum { values: one, centered: true }).map_err(|e| e.to_string())?;
    let au = collapse_auc(&Spectrum { values: vec![1.0; 4], centered: true }).map_err(|e| e.to_string())?;
    ensure(a1 == 1.0 && au == 0.625, || format!("endpoints: one-hot {a1}, uniform d=4 {au}"))?;
    Ok(format!("100 matrices up to 512x128, worst relative deviation {worst:.1e}; AUC endpoints 1 and 0.625 exact"))
}

// ---- 3 ---------------------------------------------------------------------

fn collapse_types() -> Outcome {
    let (n, d) = (500, 32);
    let mut gaps = Vec::new();
    let mut worst_std = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let base = gaussian(&mut r, n, d);
        let indep = gaussian(&mut r, n, 1);
        let col = |m: &[f64], j: usize| (0..n).map(|i| m[i * d + j]).collect::<Vec<f64>>();
        let stats = |c: &[f64]| {
            let mu = c.iter().sum::<f64>() / n as f64;
            (mu, (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt())
        };
        let src = col(&base, 0);
        let ((ms, ss), (mi, si)) = (stats(&src), stats(&indep));
        let (mut collapsed, mut control) = (base.clone(), base);
        for i in 0..n {
            collapsed[i * d + d - 1] = src[i];
            control[i * d + d - 1] = (indep[i] - mi) / si * ss + ms;
        }
        let (a, b) = (repr(n, d, &collapsed), repr(n, d, &control));
        let ra = collapse_report(&a, true).map_err(|e| e.to_string())?;
        let rb = collapse_report(&b, true).map_err(|e| e.to_string())?;
        ensure(ra.auc > rb.auc, || format!("seed {seed}: duplicated AUC {} not above control {}", ra.auc, rb.auc))?;
        gaps.push(ra.auc - rb.auc);
        let (sa, sb) = (per_dim_std(&a).map_err(|e| e.to_string())?, per_dim_std(&b).map_err(|e| e.to_string())?);
        worst_std = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).fold(worst_std, f64::max);
    }
    ensure(worst_std < 1e-6, || format!("per-dimension std differs by {worst_std:.2e}"))?;
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("10 seeds: AUC gap >= {min_gap:.4}, max |delta std| {worst_std:.1e}"))
}

// ---- 4 ---------------------------------------------------------------------

fn scheduler() -> Outcome {
    for seed in 0..50 {
        check_schedule_invariants(seed, 1000, 10, 200, 20, 4).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok("50 seeds at T=1000, C=10, N=200, B=20, K=4".into())
}

// ---- 5 to 8, 10: CIFAR-10 --------------------------------------------------

fn cifar_dir() -> Result<PathBuf, String> {
    let dir = std::env::var_os("NCSL_CIFAR10_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("data/cifar-10-batches-bin"));
    let names = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"];
    match names.iter().find(|f| !dir.join(f).is_file()) {
        None => Ok(dir),
        Some(f) => Err(format!(
            "CIFAR-10 binary batches not found ({} missing); set NCSL_CIFAR10_DIR to the cifar-10-batches-bin directory to run this criterion",
            dir.join(f).display()
        )),
    }
}

fn acceptance_dir() -> PathBuf {
    std::env::var_os("NCSL_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("target/acceptance"))
}

fn base_config(data: &Path) -> Result<PathBuf, String> {
    let text = fs::read_to_string(workspace().join("configs/cifar10-tiny.toml")).map_err(|e| e.to_string())?;
    let mut t: toml::Table = toml::from_str(&text).map_err(|e| e.to_string())?;
    t["dataset"].as_table_mut().unwrap().insert("path".into(), data.to_string_lossy().into_owned().into());
    let cfg = RunConfig::from_toml_str(&toml::to_string(&t).unwrap()).map_err(|e| e.to_string())?;
    let m = build_siamese::<f32>(&cfg.encoder, &cfg.heads, cfg.variant, ncsl_core::models::InputShape { channels: 3, height: 32, width: 32 }, &cfg.model, 0)
        .map_err(|e| e.to_string())?;
    ensure(m.encoder_param_count() <= 200_000, || format!("encoder has {} parameters", m.encoder_param_count()))?;
    let dir = acceptance_dir();
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let p = dir.join("cifar10-tiny.toml");
    fs::write(&p, toml::to_string(&t).unwrap()).map_err(|e| e.to_string())?;
    Ok(p)
}

fn sweep(name: &str, base: &Path) -> Result<Vec<ModelRecord>, String> {
    let mut sw = SweepConfig::load(&workspace().join(format!("configs/sweeps/{name}.toml"))).map_err(|e| format!("{e:#}"))?;
    sw.base = base.to_path_buf();
    sw.output_dir = acceptance_dir().join(name);
    sw.records = None;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let (_, recs) = run_sweep(&sw, jobs, &ncsl_exe()?).map_err(|e| format!("{e:#}"))?;
    if let Some(bad) = recs.iter().find(|r| r.failed()) {
        return Err(format!("{}: {}", bad.model_id, bad.status));
    }
    Ok(recs)
}

/// Records of one sweep, keyed by seed then run name.
fn by_seed(recs: &[ModelRecord]) -> BTreeMap<u64, BTreeMap<String, ModelRecord>> {
    let mut out: BTreeMap<u64, BTreeMap<String, ModelRecord>> = BTreeMap::new();
    for r in recs {
        let seed = r.seed.unwrap_or_default();
        let name = r.model_id.rsplit_once("-s").map_or(r.model_id.clone(), |(n, _)| n.to_string());
        out.entry(seed).or_default().insert(name, r.clone());
    }
    out
}

fn majority(votes: &[(u64, bool, String)]) -> Outcome {
    let wins = votes.iter().filter(|v| v.1).count();
    let detail: Vec<String> = votes.iter().map(|(s, ok, d)| format!("seed {s} {}: {d}", if *ok { "ok" } else { "no" })).collect();
    let text = format!("{wins}/{} seeds; {}", votes.len(), detail.join("; "));
    if 2 * wins > votes.len() {
        Ok(text)
    } else {
        Err(text)
    }
}

#[derive(Default)]
struct CifarRuns {
    subsets: Option<Result<Vec<ModelRecord>, String>>,
    orderings: Option<Result<Vec<ModelRecord>, String>>,
    ema: Option<Result<Vec<ModelRecord>, String>>,
    base: Option<PathBuf>,
}

impl CifarRuns {
    fn get(&mut self, which: &str) -> Result<Vec<ModelRecord>, String> {
        let data = cifar_dir()?;
        if self.base.is_none() {
            self.base = Some(base_config(&data)?);
        }
        let base = self.base.clone().unwrap();
        let slot = match which {
            "cifar10-subsets" => &mut self.subsets,
            "cifar10-orderings" => &mut self.orderings,
            _ => &mut self.ema,
        };
        slot.get_or_insert_with(|| sweep(which, &base)).clone()
    }
}

const FRACTIONS: [&str; 4] = ["frac-0.02", "frac-0.10", "frac-0.50", "frac-1.00"];

fn subset_trend(runs: &mut CifarRuns) -> Outcome {
    let recs = runs.get("cifar10-subsets")?;
    let mut votes = Vec::new();
    for (seed, m) in by_seed(&recs) {
        let get = |f: &str, g: fn(&ModelRecord) -> Option<f64>| m.get(f).and_then(g).ok_or_else(|| format!("seed {seed}: {f} missing"));
        let auc: Vec<f64> = FRACTIONS.iter().map(|f| get(f, |r| r.auc)).collect::<Result<_, _>>()?;
        let knn: Vec<f64> = FRACTIONS.iter().map(|f| get(f, |r| r.knn_acc)).collect::<Result<_, _>>()?;
        let loss: Vec<f64> = FRACTIONS.iter().map(|f| get(f, |r| r.val_loss)).collect::<Result<_, _>>()?;
        let auc_up = auc.windows(2).all(|w| w[1] >= w[0]) && auc[3] - auc[0] >= 0.02;
        let knn_not_monotone = knn.windows(2).any(|w| w[1] < w[0]) && knn.windows(2).any(|w| w[1] > w[0]);
        let loss_monotone = loss.windows(2).all(|w| w[1] <= w[0]);
        votes.push((
            seed,
            auc_up && knn_not_monotone && loss_monotone,
            format!("auc {auc:.3?}, knn {knn:.3?}, val loss {loss:.4?}"),
        ));
    }
    majority(&votes)
}

fn ordering_comparison(runs: &mut CifarRuns) -> Outcome {
    let recs = runs.get("cifar10-orderings")?;
    let mut votes = Vec::new();
    for (seed, m) in by_seed(&recs) {
        let (mp, sp, hy) = match (m.get("multiple-pass"), m.get("single-pass"), m.get("hybrid-40")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(format!("seed {seed}: ordering runs missing")),
        };
        let (a_mp, a_sp, a_hy) = (mp.auc.unwrap(), sp.auc.unwrap(), hy.auc.unwrap());
        let (k_mp, k_hy) = (mp.knn_acc.unwrap(), hy.knn_acc.unwrap());
        votes.push((
            seed,
            a_hy < a_mp && a_sp < a_mp && k_hy >= k_mp,
            format!("auc mp {a_mp:.3} sp {a_sp:.3} hybrid {a_hy:.3}; knn mp {k_mp:.3} hybrid {k_hy:.3}"),
        ));
    }
    majority(&votes)
}

fn ema_ablation(runs: &mut CifarRuns) -> Outcome {
    let simsiam = by_seed(&runs.get("cifar10-subsets")?);
    let byol = by_seed(&runs.get("cifar10-ema")?);
    let mut votes = Vec::new();
    for (seed, m) in &byol {
        let b = m.get("byol").and_then(|r| r.auc).ok_or("byol run missing")?;
        let s = simsiam.get(seed).and_then(|m| m.get("frac-1.00")).and_then(|r| r.auc).ok_or("simsiam full-data run missing")?;
        votes.push((*seed, b < s, format!("auc byol {b:.3} simsiam {s:.3}")));
    }
    majority(&votes)
}

fn predictor_fit(runs: &mut CifarRuns) -> Outcome {
    let mut all = runs.get("cifar10-subsets")?;
    all.extend(runs.get("cifar10-orderings")?);
    all.extend(runs.get("cifar10-ema")?);
    let usable = all.iter().filter(|r| r.probe_acc.is_some()).count();
    ensure(usable >= 12, || format!("only {usable} models with probe accuracy"))?;
    let rep = fit_predictor_report(&all, LossFeature::ValLoss).map_err(|e| e.to_string())?;
    let t = &rep.two_feature;
    let text = format!(
        "val-loss fit on {} models: r2 two {:.3} loss-only {:.3} auc-only {:.3}; coef loss {:.3} auc {:.3}",
        t.n_points, t.r2, rep.loss_only.r2, rep.auc_only.r2, t.coef_loss, t.coef_auc
    );
    let extra = match fit_predictor_report(&all, LossFeature::TrainLoss) {
        Ok(tr) => format!(
            " (train-loss fit: r2 {:.3}, coef loss {:.3} auc {:.3})",
            tr.two_feature.r2, tr.two_feature.coef_loss, tr.two_feature.coef_auc
        ),
        Err(e) => format!(" (train-loss fit failed: {e})"),
    };
    let ok = t.r2 > rep.loss_only.r2 && t.r2 > rep.auc_only.r2 && t.coef_loss < 0.0 && t.coef_auc < 0.0;
    if ok {
        Ok(text + &extra)
    } else {
        Err(text + &extra)
    }
}

/// Student backbone for the distillation comparison: one block shallower
/// than the teacher.
fn student_encoder(teacher: &EncoderConfig) -> EncoderConfig {
    EncoderConfig { depth: teacher.depth - 1, ..teacher.clone() }
}

fn distill_comparison(runs: &mut CifarRuns) -> Result<String, String> {
    let recs = runs.get("cifar10-subsets")?;
    let base = RunConfig::load(runs.base.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let small = student_encoder(&base.encoder);
    let exe = ncsl_exe()?;
    let root = acceptance_dir().join("distill");
    let mut votes = Vec::new();
    for (seed, m) in by_seed(&recs) {
        let (name, teacher) = m
            .iter()
            .max_by(|a, b| a.1.knn_acc.unwrap_or(0.0).total_cmp(&b.1.knn_acc.unwrap_or(0.0)))
            .ok_or("no teacher runs")?;
        let teacher_ckpt = acceptance_dir().join("cifar10-subsets").join(&teacher.model_id).join("final.ckpt");

        let mut cfg = base.clone();
        cfg.set_seed(seed);
        cfg.output_dir = root.join(format!("student-s{seed}"));
        cfg.distill.student = Some(small.clone());
        let dcfg = root.join(format!("student-s{seed}.toml"));
        fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        fs::write(&dcfg, cfg.to_toml_string().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let student_ckpt = cfg.output_dir.join("final.ckpt");
        if !student_ckpt.exists() {
            let st = Command::new(&exe).arg("distill").arg("-c").arg(&dcfg).arg("--teacher").arg(&teacher_ckpt).status().map_err(|e| e.to_string())?;
            ensure(st.success(), || format!("distill for seed {seed} exited with {st}"))?;
        }
        let (student, _) = load_student(&student_ckpt).map_err(|e| e.to_string())?;
        let data = EvalData::load(&cfg).map_err(|e| format!("{e:#}"))?;
        let distilled = evaluate_backbone(&student, &cfg, &data, false).map_err(|e| format!("{e:#}"))?.knn.accuracy;

        let mut scratch = base.clone();
        scratch.set_seed(seed);
        scratch.encoder = small.clone();
        scratch.output_dir = root.join(format!("scratch-s{seed}"));
        let scfg = root.join(format!("scratch-s{seed}.toml"));
        fs::write(&scfg, scratch.to_toml_string().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let rec_path = scratch.output_dir.join("record.json");
        if !rec_path.exists() {
            let st = Command::new(&exe)
                .args(["run-one", "--no-probe", "--id", &format!("scratch-s{seed}"), "--config"])
                .arg(&scfg)
                .arg("--record")
                .arg(&rec_path)
                .status()
                .map_err(|e| e.to_string())?;
            ensure(st.success(), || format!("scratch student for seed {seed} exited with {st}"))?;
        }
        let rec: ModelRecord = serde_json::from_str(&fs::read_to_string(&rec_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let scratch_knn = rec.knn_acc.unwrap_or(0.0);
        votes.push((seed, distilled > scratch_knn, format!("teacher {name}, distilled knn {distilled:.3} vs scratch {scratch_knn:.3}")));
    }
    majority(&votes)
}

fn normalizer_convergence() -> Outcome {
    let mut r = rng(10);
    let d = 16;
    let (mut worst_out, mut worst_run) = (0.0f64, 0.0f64);
    for (mu, sd) in [(0.0, 1.0), (3.0, 2.0), (-1.5, 0.25)] {
        let dist = Normal::new(mu, sd).unwrap();
        let mut n = OnlineNormalizer::new(d, 0.9).map_err(|e| e.to_string())?;
        // moments of the normalized stream over the second half
        let (mut s1, mut s2, mut count) = (vec![0.0f64; d], vec![0.0f64; d], 0.0);
        for step in 0..200 {
            let b: Vec<f32> = (0..256 * d).map(|_| dist.sample(&mut r) as f32).collect();
            let out = n.update(&Tensor::new(vec![256, d], b).unwrap()).map_err(|e| e.to_string())?;
            if step >= 100 {
                for row in out.data().chunks(d) {
                    for j in 0..d {
                        s1[j] += row[j] as f64;
                        s2[j] += (row[j] as f64).powi(2);
                    }
                }
                count += 256.0;
            }
        }
        for j in 0..d {
            let m = s1[j] / count;
            worst_out = worst_out.max(m.abs()).max((s2[j] / count - m * m - 1.0).abs());
            worst_run = worst_run.max((n.mean[j] - mu).abs() / sd).max((n.var[j] / (sd * sd) - 1.0).abs());
        }
    }
    ensure(worst_out < 0.1 && worst_run < 0.1, || {
        format!("normalized stream off (0, 1) by {worst_out:.3}; running stats off the source by {worst_run:.3}")
    })?;
    Ok(format!("3 stationary streams: normalized stream within {worst_out:.3} of (0, 1), running stats within {worst_run:.3}"))
}

// ---- 9 ---------------------------------------------------------------------

fn knn_oracle() -> Outcome {
    let mut r = rng(909);
    let mut checked = 0usize;
    for inst in 0..200 {
        let n = r.random_range(2..=500);
        let d = r.random_range(1..=32);
        let q = r.random_range(1..=30);
        let train = gaussian(&mut r, n, d);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..5)).collect();
        let queries = gaussian(&mut r, q, d);
        let ks: Vec<usize> = [1, 3, 5, 10, 50].into_iter().filter(|&k| k <= n).collect();
        let (tm, qm) = (repr(n, d, &train), repr(q, d, &queries));
        let got = knn_predict(&tm, &labels, &qm, &ks).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| tm.row(i).iter().map(|&v| v as f64).collect()).collect();
        for (qi, pred) in got.iter().enumerate() {
            let query: Vec<f64> = qm.row(qi).iter().map(|&v| v as f64).collect();
            for (ki, &k) in ks.iter().enumerate() {
                let want = brute_force_knn(&rows, &labels, &query, k);
                ensure(pred[ki] == want, || format!("instance {inst}, query {qi}, k {k}: {} vs oracle {want}", pred[ki]))?;
                checked += 1;
            }
        }
    }
    Ok(format!("200 instances, {checked} predictions identical to the brute-force reference"))
}

// ---- 11 --------------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let mut cfg = tiny_config(d, "nnsiam", "hybrid", 60, 16);
    cfg.ordering.switch_chunk = Some(2);
    cfg.distill.total_steps = Some(20);
    let cpath = d.join("cfg.toml");
    fs::write(&cpath, cfg.to_toml_string().unwrap()).unwrap();
    let exe = ncsl_exe()?;
    let c = cpath.to_str().unwrap();
    let run_dir = cfg.output_dir.clone();
    let ckpt = run_dir.join("final.ckpt");
    let k = ckpt.to_str().unwrap().to_string();
    let repr_path = d.join("out/val.repr");
    let rp = repr_path.to_str().unwrap().to_string();
    let tp = d.join("out/train.repr").to_string_lossy().into_owned();
    let commands: Vec<Vec<String>> = vec![
        vec!["pretrain".into(), "-c".into(), c.into()],
        vec!["extract".into(), "-c".into(), c.into(), "--checkpoint".into(), k.clone(), "--out".into(), rp.clone()],
        vec!["extract".into(), "-c".into(), c.into(), "--checkpoint".into(), k.clone(), "--out".into(), tp.clone(), "--split".into(), "train".into()],
        vec!["diagnose".into(), rp.clone()],
        vec!["knn".into(), "--train".into(), tp.clone(), "--val".into(), rp.clone(), "--out".into(), d.join("out/knn.json").to_string_lossy().into()],
        vec!["probe".into(), "-c".into(), c.into(), "--checkpoint".into(), k.clone(), "--out".into(), d.join("out/probe.json").to_string_lossy().into()],
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&run_dir);
        let _ = fs::remove_dir_all(d.join("out"));
        fs::create_dir_all(d.join("out")).unwrap();
        let mut stdout = Vec::new();
        for args in &commands {
            let o = Command::new(&exe).args(args).env_remove("NCSL_SEED").output().map_err(|e| e.to_string())?;
            ensure(o.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))?;
            stdout.push(o.stdout);
        }
        let metrics: Vec<(usize, u64, u64)> = read_metrics(&run_dir.join("metrics.jsonl"))
            .map_err(|e| e.to_string())?
            .iter()
            .map(|m| (m.step, m.lr.to_bits(), m.train_loss.to_bits()))
            .collect();
        let mut files = snapshot(&run_dir);
        files.remove("metrics.jsonl");
        files.extend(snapshot(&d.join("out")).into_iter().map(|(k, v)| (format!("out/{k}"), v)));
        runs.push((metrics, files, stdout));
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure(a.0 == b.0, || "metrics differ between identical runs".into())?;
    for (name, bytes) in &a.1 {
        ensure(b.1.get(name) == Some(bytes), || format!("{name} differs between identical runs"))?;
    }
    ensure(a.1.len() == b.1.len(), || "different file sets".into())?;
    ensure(a.2 == b.2, || "command outputs differ".into())?;
    let ckpts = a.1.keys().filter(|k| k.ends_with(".ckpt")).count();
    Ok(format!(
        "pretrain/extract/diagnose/knn/probe twice: {} metrics records and {} files ({ckpts} checkpoints) bitwise identical",
        a.0.len(),
        a.1.len()
    ))
}

#[test]
fn acceptance_criteria() {
    let mut cifar = CifarRuns::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        let line = match &o {
            Ok(d) => format!("PASS criterion {n:>2} {name}: {d}"),
            Err(d) => format!("FAIL criterion {n:>2} {name}: {d}"),
        };
        println!("{line}");
        results.push((n, name, o));
    };
    record(1, "gradient suite", gradients());
    record(2, "spectrum oracle", spectrum_oracle());
    record(3, "collapse-type detection", collapse_types());
    record(4, "scheduler suite", scheduler());
    record(5, "desk-scale collapse trend", subset_trend(&mut cifar));
    record(6, "ordering comparison", ordering_comparison(&mut cifar));
    record(7, "EMA ablation", ema_ablation(&mut cifar));
    record(8, "predictor fit", predictor_fit(&mut cifar));
    record(9, "k-NN oracle equivalence", knn_oracle());
    let stats = normalizer_convergence();
    let student = distill_comparison(&mut cifar);
    let c10 = match (&student, &stats) {
        (Ok(a), Ok(b)) => Ok(format!("{a}; normalizer: {b}")),
        (a, b) => Err(format!(
            "distilled vs scratch: {}; normalizer: {}",
            a.as_ref().map_or_else(|e| format!("FAIL ({e})"), |d| format!("ok ({d})")),
            b.as_ref().map_or_else(|e| format!("FAIL ({e})"), |d| format!("ok ({d})"))
        )),
    };
    record(10, "distillation", c10);
    record(11, "reproducibility", reproducibility());

    let failed: Vec<String> = results.iter().filter(|r| r.2.is_err()).map(|r| format!("{} ({})", r.0, r.1)).collect();
    println!("{} of {} criteria pass", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failing criteria: {}", failed.join(", "));
}
