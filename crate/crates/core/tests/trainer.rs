use std::fs;
use std::path::Path;

use ncsl_core::datapipe::Split;
use ncsl_core::diagnostics::extract_representations;
use ncsl_core::models::Backbone;
use ncsl_core::trainer::{load_siamese, read_metrics, validation_loss, warmup_cosine_lr, MetricsRecord, Trainer};
use ncsl_core::CoreError;
use ncsl_testkit::tiny_config;

fn without_wall(r: &[MetricsRecord]) -> Vec<(usize, u64, u64)> {
    r.iter().map(|m| (m.step, m.lr.to_bits(), m.train_loss.to_bits())).collect()
}

#[test]
fn ten_step_run_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "simsiam", "multiple_pass", 12, 16);
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    let out = tr.run().unwrap();
    let recs = read_metrics(&out.metrics).unwrap();
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10, 12]);
    assert!(recs.iter().all(|r| r.train_loss.is_finite() && r.train_loss >= -1.0 && r.train_loss <= 1.0));
    assert_eq!(tr.step(), 12);
    // checkpoint cadence: every T/10 = 1 step, plus the final one
    assert_eq!(out.checkpoints.len(), 12);
    assert!(cfg.output_dir.join("config.toml").exists());

    let (model, meta) = load_siamese(&out.final_checkpoint).unwrap();
    assert_eq!(meta.step, 12);
    assert_eq!(meta.config, *tr.config());
    let ds = tr.data();
    let geom = cfg.eval_geometry(ds);
    let a = extract_representations(tr.model(), ds, 32, geom, cfg.normalize(), "live").unwrap();
    let b = extract_representations(&model, ds, 32, geom, cfg.normalize(), "loaded").unwrap();
    assert_eq!(a.data, b.data, "save/load must reproduce eval outputs bitwise");
}

#[test]
fn simsiam_training_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "simsiam", "multiple_pass", 2000, 32);
    cfg.log_every = 100;
    cfg.checkpoint_every = Some(2000);
    let out = Trainer::new(cfg).unwrap().run().unwrap();
    let recs = read_metrics(&out.metrics).unwrap();
    let (first, last) = (recs[0].train_loss, recs.last().unwrap().train_loss);
    assert_eq!(recs.last().unwrap().step, 2000);
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn byol_target_is_the_ema_of_the_online_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "byol", "multiple_pass", 30, 16);
    cfg.model.tau = 0.9;
    let mut tr = Trainer::new(cfg).unwrap();
    let g = tr.model().graph();
    let pairs: Vec<(usize, usize)> = tr.model().ema_pairs().iter().map(|(t, o)| (t.0, o.0)).collect();
    assert!(!pairs.is_empty());
    // replay in float64 from the shared initial point
    let mut replay: Vec<Vec<f64>> = pairs.iter().map(|&(_, o)| g.params()[o].value.data().iter().map(|&v| v as f64).collect()).collect();
    for _ in 0..30 {
        tr.step_once().unwrap();
        let g = tr.model().graph();
        for (r, &(_, o)) in replay.iter_mut().zip(&pairs) {
            for (t, &v) in r.iter_mut().zip(g.params()[o].value.data()) {
                *t = 0.9 * *t + 0.1 * v as f64;
            }
        }
    }
    let g = tr.model().graph();
    let mut worst = 0.0f64;
    for (r, &(t, _)) in replay.iter().zip(&pairs) {
        for (want, &got) in r.iter().zip(g.params()[t].value.data()) {
            worst = worst.max((want - got as f64).abs() / want.abs().max(1.0));
        }
    }
    assert!(worst < 1e-5, "target deviates from the replayed EMA by {worst}");
    // the online network moved, so the target is not simply a copy
    let moved = pairs.iter().any(|&(t, o)| g.params()[t].value.data() != g.params()[o].value.data());
    assert!(moved);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn identical_runs_are_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = tiny_config(a.path(), "nnsiam", "hybrid", 40, 16);
    ca.ordering.switch_chunk = Some(2);
    let mut cb = ca.clone();
    cb.output_dir = b.path().join("run");
    let oa = Trainer::new(ca.clone()).unwrap().run().unwrap();
    let ob = Trainer::new(cb.clone()).unwrap().run().unwrap();
    assert_eq!(without_wall(&read_metrics(&oa.metrics).unwrap()), without_wall(&read_metrics(&ob.metrics).unwrap()));
    let fa = files(&ca.output_dir.join("checkpoints"));
    assert_eq!(fa.len(), 10);
    assert_eq!(fa, files(&cb.output_dir.join("checkpoints")));
    assert_eq!(fs::read(&oa.final_checkpoint).unwrap(), fs::read(&ob.final_checkpoint).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for variant in ["simsiam", "byol", "nnsiam"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = tiny_config(a.path(), variant, "cumulative", 40, 16);
        let full = Trainer::new(ca.clone()).unwrap().run().unwrap();
        let mut cb = ca.clone();
        cb.output_dir = b.path().join("run");
        let mid = ca.output_dir.join("checkpoints/step_0000020.ckpt");
        let mut resumed = Trainer::resume(cb.clone(), &mid).unwrap();
        assert_eq!(resumed.step(), 20);
        let rest = resumed.run().unwrap();
        let want: Vec<_> = without_wall(&read_metrics(&full.metrics).unwrap()).into_iter().filter(|r| r.0 > 20).collect();
        assert_eq!(without_wall(&read_metrics(&rest.metrics).unwrap()), want, "{variant}");
        assert_eq!(fs::read(&full.final_checkpoint).unwrap(), fs::read(&rest.final_checkpoint).unwrap(), "{variant}");
    }
}

#[test]
fn every_ordering_runs_exactly_t_steps() {
    for mode in ["multiple_pass", "single_pass", "cumulative", "hybrid"] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), "simsiam", mode, 20, 8);
        if mode == "hybrid" {
            cfg.ordering.switch_chunk = Some(1);
        }
        let mut tr = Trainer::new(cfg).unwrap();
        let out = tr.run().unwrap();
        assert_eq!(tr.step(), 20);
        assert_eq!(read_metrics(&out.metrics).unwrap().last().unwrap().step, 20);
        assert!(tr.step_once().is_err());
    }
}

#[test]
fn hybrid_keeps_one_global_cosine() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "simsiam", "hybrid", 400, 8);
    cfg.ordering.switch_chunk = Some(2);
    let tr = Trainer::new(cfg).unwrap();
    for s in [0, 199, 200, 201, 399] {
        assert_eq!(tr.lr_at(s).unwrap(), warmup_cosine_lr(s, 0, 400, 0.05).unwrap());
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "simsiam", "multiple_pass", 50, 16);
    cfg.base_lr = Some(1e30);
    cfg.checkpoint_every = Some(1);
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    match tr.run() {
        Err(CoreError::NonFiniteLoss { step }) => {
            assert!(step >= 1 && step < 50);
            assert!(cfg.output_dir.join(format!("checkpoints/step_{step:07}.ckpt")).exists());
        }
        other => panic!("expected a non-finite loss abort, got {:?}", other.map(|o| o.final_loss)),
    }
}

#[test]
fn extraction_is_deterministic_and_batch_size_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "simsiam", "multiple_pass", 10, 16);
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..10 {
        tr.step_once().unwrap();
    }
    let ds = cfg.dataset.load(Split::Val, cfg.seed).unwrap().select(&(0..16).collect::<Vec<_>>(), "val16").unwrap();
    let geom = cfg.eval_geometry(&ds);
    let m = tr.model();
    let a = extract_representations(m, &ds, 4, geom, cfg.normalize(), "c").unwrap();
    let b = extract_representations(m, &ds, 16, geom, cfg.normalize(), "c").unwrap();
    let c = extract_representations(m, &ds, 4, geom, cfg.normalize(), "c").unwrap();
    assert_eq!((a.rows, a.cols), (16, m.repr_dim()));
    assert!(a.data.iter().all(|v| v.is_finite()));
    assert_eq!(a, c);
    assert_eq!(a.data, b.data);
    assert_eq!(a.meta.labels.as_deref(), Some(&ds.labels[..]));
}

#[test]
fn validation_loss_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "simsiam", "multiple_pass", 10, 16);
    let tr = Trainer::new(cfg.clone()).unwrap();
    let val = cfg.dataset.load(Split::Val, cfg.seed).unwrap();
    let a = validation_loss(tr.model(), &val, &cfg).unwrap();
    let b = validation_loss(tr.model(), &val, &cfg).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!((-1.0..=1.0).contains(&a));
}
