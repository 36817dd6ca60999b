//! Methods-by-architecture comparison tables from collated records.

use std::collections::BTreeMap;
use std::fmt::Write;

use anyhow::{bail, Result};

use ncsl_core::eval::ModelRecord;

pub const METRICS: [&str; 6] = ["knn_acc", "probe_acc", "auc", "auc_uncentered", "val_loss", "train_loss"];

fn metric(r: &ModelRecord, name: &str) -> Option<f64> {
    match name {
        "knn_acc" => r.knn_acc,
        "probe_acc" => r.probe_acc,
        "auc" => r.auc,
        "auc_uncentered" => r.auc_uncentered,
        "val_loss" => r.val_loss,
        "train_loss" => r.train_loss,
        _ => None,
    }
}

/// Row label: variant and ordering, plus the subset fraction when partial.
pub fn method_label(r: &ModelRecord) -> String {
    let mut s = format!("{} / {}", r.variant.as_deref().unwrap_or("?"), r.ordering.as_deref().unwrap_or("?"));
    if let Some(f) = r.fraction.filter(|&f| f < 1.0) {
        let _ = write!(s, " @ {}%", f * 100.0);
    }
    s
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Markdown table of `metric` (mean ± std over seeds). Accuracies are shown
/// in percent.
pub fn comparison_table(records: &[ModelRecord], metric_name: &str) -> Result<String> {
    if !METRICS.contains(&metric_name) {
        bail!("unknown metric {metric_name:?}; choose one of {}", METRICS.join(", "));
    }
    let pct = metric_name.ends_with("_acc");
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut archs: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    let mut failed = Vec::new();
    for r in records {
        if r.failed() {
            failed.push(r.model_id.as_str());
            continue;
        }
        let (m, a) = (method_label(r), r.arch.clone().unwrap_or_else(|| "?".into()));
        if !methods.contains(&m) {
            methods.push(m.clone());
        }
        if !archs.contains(&a) {
            archs.push(a.clone());
        }
        if let Some(v) = metric(r, metric_name) {
            cells.entry((m, a)).or_default().push(if pct { 100.0 * v } else { v });
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "| method ({metric_name}) | {} |", archs.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(archs.len()));
    for m in &methods {
        let row: Vec<String> = archs
            .iter()
            .map(|a| match cells.get(&(m.clone(), a.clone())) {
                Some(v) => {
                    let (mean, sd) = mean_std(v);
                    let digits = if pct { 1 } else { 4 };
                    format!("{mean:.digits$} ± {sd:.digits$} (n={})", v.len())
                }
                None => "-".into(),
            })
            .collect();
        let _ = writeln!(out, "| {m} | {} |", row.join(" | "));
    }
    if !failed.is_empty() {
        let _ = writeln!(out, "\nFailed runs: {}", failed.join(", "));
    }
    Ok(out)
}
