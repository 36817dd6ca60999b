//! Train-then-evaluate composition shared by `run-one`, `sweep` and the
//! acceptance suite.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ncsl_core::config::RunConfig;
use ncsl_core::datapipe::{Dataset, OrderingMode, Split};
use ncsl_core::diagnostics::{collapse_report, extract_representations, CollapseReport};
use ncsl_core::eval::{knn_evaluate, linear_probe, KnnResult, ModelRecord, ProbeResult};
use ncsl_core::models::{Backbone, EncoderKind};
use ncsl_core::trainer::{read_metrics, validation_loss, Trainer};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "NCSL_SEED";

pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Loads a run config and applies the seed override.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed_override()? {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

pub fn arch_label(cfg: &RunConfig) -> String {
    let e = &cfg.encoder;
    let kind = match e.kind {
        EncoderKind::Mlp => "mlp",
        EncoderKind::Conv => "conv",
    };
    format!("{kind}-d{}-w{}", e.depth, e.width_multiplier)
}

pub fn ordering_label(cfg: &RunConfig) -> String {
    let o = &cfg.ordering;
    match (o.mode, o.switch_chunk) {
        (OrderingMode::Hybrid, Some(k)) => format!("hybrid@{k}"),
        (m, _) => m.name().to_string(),
    }
}

/// Evaluation sets. The k-NN memory bank and the probe always use the full
/// training split, so runs on different subsets are scored identically.
pub struct EvalData {
    pub train: Dataset,
    pub val: Dataset,
}

impl EvalData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let mut full = cfg.dataset.clone();
        full.fraction = 1.0;
        Ok(Self { train: full.load(Split::Train, cfg.seed)?, val: full.load(Split::Val, cfg.seed)? })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub knn: KnnResult,
    pub probe: Option<ProbeResult>,
    pub collapse: CollapseReport,
    pub auc_uncentered: f64,
}

/// Label-based and label-free scores of a frozen backbone.
pub fn evaluate_backbone(m: &dyn Backbone, cfg: &RunConfig, data: &EvalData, probe: bool) -> Result<Evaluation> {
    let geom = cfg.eval_geometry(&data.val);
    let bs = cfg.eval.batch_size;
    let tr = extract_representations(m, &data.train, bs, geom, cfg.normalize(), "train")?;
    let va = extract_representations(m, &data.val, bs, geom, cfg.normalize(), "val")?;
    let ks: Vec<usize> = cfg.eval.k_candidates.iter().copied().filter(|&k| k <= tr.rows).collect();
    let knn = knn_evaluate(&tr, &data.train.labels, &va, &data.val.labels, &ks)?;
    let collapse = collapse_report(&va, true)?;
    let auc_uncentered = collapse_report(&va, false)?.auc;
    let probe = if probe {
        Some(linear_probe(m, &data.train, &data.val, &cfg.eval.probe, geom, cfg.normalize(), cfg.eval.seed)?)
    } else {
        None
    };
    Ok(Evaluation { knn, probe, collapse, auc_uncentered })
}

/// Pretrains one config, evaluates the final model and returns its record.
/// The evaluation is also written to `eval.json` in the run directory.
pub fn train_and_evaluate(cfg: &RunConfig, model_id: &str, probe: bool) -> Result<ModelRecord> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let out = trainer.run()?;
    let metrics = read_metrics(&out.metrics)?;
    let data = EvalData::load(cfg)?;
    let val_loss = validation_loss(trainer.model(), &data.val, cfg)?;
    let ev = evaluate_backbone(trainer.model(), cfg, &data, probe)?;
    std::fs::write(cfg.output_dir.join("eval.json"), serde_json::to_string_pretty(&ev)?)?;
    Ok(ModelRecord {
        model_id: model_id.into(),
        val_loss: Some(val_loss),
        auc: Some(ev.collapse.auc),
        probe_acc: ev.probe.as_ref().map(|p| p.accuracy),
        train_loss: metrics.last().map(|m| m.train_loss),
        auc_uncentered: Some(ev.auc_uncentered),
        knn_acc: Some(ev.knn.accuracy),
        best_k: Some(ev.knn.best_k),
        variant: Some(cfg.variant.name().into()),
        ordering: Some(ordering_label(cfg)),
        arch: Some(arch_label(cfg)),
        fraction: Some(cfg.dataset.fraction),
        seed: Some(cfg.seed),
        status: String::new(),
    })
}
