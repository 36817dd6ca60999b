//! Command-line front end: pretraining, extraction, diagnostics, evaluation,
//! accuracy prediction, distillation and sweeps.

pub mod pipeline;
pub mod report;
pub mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ncsl_core::config::DEFAULT_K_CANDIDATES;
use ncsl_core::datapipe::Split;
use ncsl_core::diagnostics::{collapse_report, extract_representations, ReprMatrix};
use ncsl_core::distill::distill;
use ncsl_core::eval::{
    fit_predictor_report, knn_evaluate, linear_probe, rank_candidates, read_records, LossFeature, PredictorFit, PredictorReport,
};
use ncsl_core::trainer::{load_backbone, pretrain, Trainer};

use crate::pipeline::{load_config, train_and_evaluate};

#[derive(Parser, Debug)]
#[command(name = "ncsl", version, about = "Non-contrastive Siamese learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Val,
    Train,
}

impl From<LossArg> for LossFeature {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Val => LossFeature::ValLoss,
            LossArg::Train => LossFeature::TrainLoss,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Pretrain a siamese model; writes checkpoints and metrics.jsonl.
    Pretrain {
        #[arg(short, long)]
        config: PathBuf,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write the backbone representations of a split to a .repr file.
    Extract {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Collapse report (JSON) and spectrum curve (CSV) of a .repr file.
    Diagnose {
        repr: PathBuf,
        /// Use the raw matrix instead of mean-centered columns.
        #[arg(long)]
        no_center: bool,
        /// Output prefix; defaults to the input path without extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine k-NN accuracy of validation representations.
    Knn {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// JSON `{"train": [...], "val": [...]}`; defaults to the labels
        /// stored in the .repr files.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear probe on a frozen checkpoint.
    Probe {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the loss + AUC accuracy predictor, or apply a saved fit, and rank
    /// the records.
    Predict {
        #[arg(long)]
        records: PathBuf,
        /// Existing fit to apply instead of fitting the records.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        loss: LossArg,
        /// Directory for predictor_fit.json and ranking.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Distill a teacher checkpoint into a student backbone.
    Distill {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Run every entry of a sweep file in child processes and collate records.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Comparison table of a records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "knn_acc")]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one config, writing a record (used by sweep).
    #[command(hide = true)]
    RunOne {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        no_probe: bool,
    },
}

/// Both loss variants are fitted when the records carry them.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct FitFile {
    pub val_loss: Option<PredictorReport>,
    pub train_loss: Option<PredictorReport>,
}

#[derive(Debug, Deserialize)]
struct LabelFile {
    train: Vec<u32>,
    val: Vec<u32>,
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(p) = out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    print_stdout(&format!("{text}\n"))
}

/// Writes to stdout; a closed pipe (`ncsl ... | head`) is not an error.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn stored_labels(m: &ReprMatrix, path: &Path) -> Result<Vec<u32>> {
    m.meta.labels.clone().with_context(|| format!("{} carries no labels; pass --labels", path.display()))
}

fn predict(records: &Path, fit: Option<&Path>, loss: LossFeature, out_dir: Option<&Path>) -> Result<()> {
    let recs = read_records(records)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| records.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir)?;
    let two: PredictorFit = match fit {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: FitFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let rep = match loss {
                LossFeature::ValLoss => file.val_loss,
                LossFeature::TrainLoss => file.train_loss,
            };
            rep.with_context(|| format!("{} has no {loss:?} fit", p.display()))?.two_feature
        }
        None => {
            let file = FitFile {
                val_loss: fit_predictor_report(&recs, LossFeature::ValLoss).map_err(|e| log::warn!("val_loss fit: {e}")).ok(),
                train_loss: fit_predictor_report(&recs, LossFeature::TrainLoss).map_err(|e| log::warn!("train_loss fit: {e}")).ok(),
            };
            let chosen = match loss {
                LossFeature::ValLoss => &file.val_loss,
                LossFeature::TrainLoss => &file.train_loss,
            };
            let Some(rep) = chosen.clone() else {
                // surface the real reason, including the single-feature hint
                let e = fit_predictor_report(&recs, loss).unwrap_err();
                bail!("{e}; a single-feature fit may still be possible (see loss_only / auc_only)");
            };
            emit(&file, Some(&dir.join("predictor_fit.json")))?;
            rep.two_feature
        }
    };
    let loss_of = |r: &ncsl_core::eval::ModelRecord| match loss {
        LossFeature::ValLoss => r.val_loss,
        LossFeature::TrainLoss => r.train_loss,
    };
    let usable: Vec<_> = recs.iter().filter(|r| !r.failed()).filter_map(|r| Some((r, loss_of(r)?, r.auc?))).collect();
    let cands: Vec<(String, f64, f64)> = usable.iter().map(|(r, l, a)| (r.model_id.clone(), *l, *a)).collect();
    let ranked = rank_candidates(&two, &cands);
    let path = dir.join("ranking.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["rank", "model_id", "predicted_acc", "probe_acc", "loss", "auc"])?;
    for (i, (id, pred)) in ranked.iter().enumerate() {
        let (r, l, a) = usable.iter().find(|u| &u.0.model_id == id).expect("ranked from usable");
        let actual = r.probe_acc.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([(i + 1).to_string(), id.clone(), pred.to_string(), actual, l.to_string(), a.to_string()])?;
    }
    w.flush()?;
    log::info!("ranking of {} models written to {}", ranked.len(), path.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Pretrain { config, resume } => {
            let cfg = load_config(&config)?;
            let out = match resume {
                Some(ck) => Trainer::resume(cfg, &ck)?.run()?,
                None => pretrain(cfg)?,
            };
            emit(
                &serde_json::json!({
                    "final_checkpoint": out.final_checkpoint,
                    "metrics": out.metrics,
                    "final_loss": out.final_loss,
                    "checkpoints": out.checkpoints.len(),
                }),
                None,
            )
        }
        Cmd::Extract { config, checkpoint, out, split } => {
            let cfg = load_config(&config)?;
            let (bb, _) = load_backbone(&checkpoint)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let ds = cfg.dataset.load(split, cfg.seed)?;
            let id = checkpoint.to_string_lossy();
            let m = extract_representations(bb.as_ref(), &ds, cfg.eval.batch_size, cfg.eval_geometry(&ds), cfg.normalize(), &id)?;
            m.save(&out)?;
            emit(&serde_json::json!({ "out": out, "rows": m.rows, "cols": m.cols, "dataset": m.meta.dataset_id }), None)
        }
        Cmd::Diagnose { repr, no_center, out } => {
            let m = ReprMatrix::load(&repr)?;
            let rep = collapse_report(&m, !no_center)?;
            let prefix = out.unwrap_or_else(|| repr.with_extension(""));
            let with = |ext: &str| PathBuf::from(format!("{}.{ext}", prefix.display()));
            rep.write_csv(&with("spectrum.csv"))?;
            rep.write_json(&with("collapse.json"))?;
            emit(
                &serde_json::json!({
                    "auc": rep.auc,
                    "centered": !no_center,
                    "effective_rank_90": rep.effective_rank_90,
                    "effective_rank_99": rep.effective_rank_99,
                    "report": with("collapse.json"),
                    "spectrum": with("spectrum.csv"),
                }),
                None,
            )
        }
        Cmd::Knn { train, val, labels, k, out } => {
            let (a, b) = (ReprMatrix::load(&train)?, ReprMatrix::load(&val)?);
            let (la, lb) = match labels {
                Some(p) => {
                    let f: LabelFile = serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
                    (f.train, f.val)
                }
                None => (stored_labels(&a, &train)?, stored_labels(&b, &val)?),
            };
            let ks = k.unwrap_or_else(|| DEFAULT_K_CANDIDATES.iter().copied().filter(|&k| k <= a.rows).collect());
            emit(&knn_evaluate(&a, &la, &b, &lb, &ks)?, out.as_deref())
        }
        Cmd::Probe { config, checkpoint, out } => {
            let cfg = load_config(&config)?;
            let (bb, _) = load_backbone(&checkpoint)?;
            let data = pipeline::EvalData::load(&cfg)?;
            let geom = cfg.eval_geometry(&data.val);
            let res = linear_probe(bb.as_ref(), &data.train, &data.val, &cfg.eval.probe, geom, cfg.normalize(), cfg.eval.seed)?;
            emit(&res, out.as_deref())
        }
        Cmd::Predict { records, fit, loss, out_dir } => predict(&records, fit.as_deref(), loss.into(), out_dir.as_deref()),
        Cmd::Distill { config, teacher } => {
            let cfg = load_config(&config)?;
            let out = distill(cfg, &teacher)?;
            emit(
                &serde_json::json!({
                    "final_checkpoint": out.final_checkpoint,
                    "metrics": out.metrics,
                    "first_loss": out.first_loss,
                    "final_loss": out.final_loss,
                }),
                None,
            )
        }
        Cmd::Sweep { config, jobs } => {
            let sw = sweep::SweepConfig::load(&config)?;
            let exe = std::env::current_exe()?;
            let (path, recs) = sweep::run_sweep(&sw, jobs, &exe)?;
            let failed = recs.iter().filter(|r| r.failed()).count();
            emit(&serde_json::json!({ "records": path, "runs": recs.len(), "failed": failed }), None)?;
            if failed > 0 {
                bail!("{failed} of {} sweep runs failed; see {}", recs.len(), path.display());
            }
            Ok(())
        }
        Cmd::Report { records, metric, out } => {
            let table = report::comparison_table(&read_records(&records)?, &metric)?;
            if let Some(p) = out {
                fs::write(&p, &table)?;
            }
            print_stdout(&table)
        }
        Cmd::RunOne { config, id, record, no_probe } => {
            let cfg = load_config(&config)?;
            let rec = train_and_evaluate(&cfg, &id, !no_probe)?;
            if let Some(dir) = record.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&record, serde_json::to_string_pretty(&rec)?)?;
            Ok(())
        }
    }
}
