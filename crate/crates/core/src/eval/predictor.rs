//! Linear accuracy predictor from loss and collapse AUC.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// One evaluated model. Columns after `probe_acc` are optional extras;
/// `status` is empty for successful runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub val_loss: Option<f64>,
    pub auc: Option<f64>,
    pub probe_acc: Option<f64>,
    #[serde(default)]
    pub train_loss: Option<f64>,
    #[serde(default)]
    pub auc_uncentered: Option<f64>,
    #[serde(default)]
    pub knn_acc: Option<f64>,
    #[serde(default)]
    pub best_k: Option<usize>,
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub ordering: Option<String>,
    #[serde(default)]
    pub arch: Option<String>,
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub status: String,
}

impl ModelRecord {
    pub fn failed(&self) -> bool {
        !self.status.is_empty()
    }
}

pub fn read_records(path: &Path) -> Result<Vec<ModelRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn write_records(path: &Path, records: &[ModelRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in records {
        w.serialize(rec)?;
    }
    if records.is_empty() {
        w.write_record(csv_header())?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

fn csv_header() -> [&'static str; 14] {
    [
        "model_id", "val_loss", "auc", "probe_acc", "train_loss", "auc_uncentered", "knn_acc", "best_k", "variant", "ordering", "arch",
        "fraction", "seed", "status",
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct OlsFit {
    /// Intercept first, then one coefficient per feature column.
    pub beta: Vec<f64>,
    pub fitted: Vec<f64>,
    pub r2: f64,
}

/// Ordinary least squares with an intercept, solved from the normal
/// equations in float64. Collinear or constant features are rejected.
pub fn ols(features: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let n = y.len();
    let p = features.len() + 1;
    if n < p {
        return Err(CoreError::Invalid(format!("{n} points cannot determine {p} coefficients")));
    }
    if features.iter().any(|f| f.len() != n) || y.iter().chain(features.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(CoreError::Invalid("features and targets need equal lengths and finite values".into()));
    }
    // Rank test on the centered, unit-norm columns so feature scale does not matter.
    let mut std_cols = Vec::new();
    for (j, f) in features.iter().enumerate() {
        let mean = f.iter().sum::<f64>() / n as f64;
        let c: Vec<f64> = f.iter().map(|v| v - mean).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * (1.0 + mean.abs()) * (n as f64).sqrt() {
            return Err(CoreError::RankDeficient(format!("feature {j} is constant")));
        }
        std_cols.extend(c.iter().map(|v| v / norm));
    }
    if features.len() > 1 {
        let s = DMatrix::from_column_slice(n, features.len(), &std_cols).singular_values();
        let (hi, lo) = (s.max(), s.min());
        if lo <= 1e-10 * hi {
            return Err(CoreError::RankDeficient(format!("feature columns are collinear (condition {:.1e})", hi / lo)));
        }
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { features[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let beta = xtx
        .lu()
        .solve(&xty)
        .ok_or_else(|| CoreError::RankDeficient("normal equations are singular".into()))?;
    let fitted: Vec<f64> = (&x * &beta).iter().copied().collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    Ok(OlsFit { beta: beta.iter().copied().collect(), fitted, r2 })
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0 + 1.0;
        for &i in &idx[s..=e] {
            r[i] = avg;
        }
        s = e + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFeature {
    ValLoss,
    TrainLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorFit {
    pub intercept: f64,
    pub coef_loss: f64,
    pub coef_auc: f64,
    pub r2: f64,
    /// Between predicted and actual accuracy on the fit set.
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub n_points: usize,
    pub loss_feature: LossFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleFit {
    pub feature: String,
    pub intercept: f64,
    pub coef: f64,
    pub r2: f64,
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub n_points: usize,
}

/// Two-feature fit plus both single-feature fits on the same records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub two_feature: PredictorFit,
    pub loss_only: SingleFit,
    pub auc_only: SingleFit,
}

fn usable(records: &[ModelRecord], feature: LossFeature) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut loss = Vec::new();
    let mut auc = Vec::new();
    let mut acc = Vec::new();
    for r in records.iter().filter(|r| !r.failed()) {
        let l = match feature {
            LossFeature::ValLoss => r.val_loss,
            LossFeature::TrainLoss => r.train_loss,
        };
        if let (Some(l), Some(a), Some(y)) = (l, r.auc, r.probe_acc) {
            loss.push(l);
            auc.push(a);
            acc.push(y);
        }
    }
    (loss, auc, acc)
}

fn single(name: &str, x: &[f64], y: &[f64]) -> Result<SingleFit> {
    let f = ols(&[x.to_vec()], y)?;
    Ok(SingleFit {
        feature: name.into(),
        intercept: f.beta[0],
        coef: f.beta[1],
        r2: f.r2,
        pearson_r: pearson(&f.fitted, y),
        spearman_rho: spearman(&f.fitted, y),
        n_points: y.len(),
    })
}

/// `acc ~ b0 + b1 * loss + b2 * auc` over records with all three values.
pub fn fit_accuracy_predictor(records: &[ModelRecord], feature: LossFeature) -> Result<PredictorFit> {
    let (loss, auc, acc) = usable(records, feature);
    if acc.len() < 3 {
        return Err(CoreError::Invalid(format!("{} usable records; the two-feature fit needs at least 3", acc.len())));
    }
    let f = ols(&[loss, auc], &acc)?;
    Ok(PredictorFit {
        intercept: f.beta[0],
        coef_loss: f.beta[1],
        coef_auc: f.beta[2],
        r2: f.r2,
        pearson_r: pearson(&f.fitted, &acc),
        spearman_rho: spearman(&f.fitted, &acc),
        n_points: acc.len(),
        loss_feature: feature,
    })
}

pub fn fit_predictor_report(records: &[ModelRecord], feature: LossFeature) -> Result<PredictorReport> {
    let two_feature = fit_accuracy_predictor(records, feature)?;
    let (loss, auc, acc) = usable(records, feature);
    let name = match feature {
        LossFeature::ValLoss => "val_loss",
        LossFeature::TrainLoss => "train_loss",
    };
    Ok(PredictorReport { two_feature, loss_only: single(name, &loss, &acc)?, auc_only: single("auc", &auc, &acc)? })
}

/// `b0 + b1 * loss + b2 * auc`, unclamped.
pub fn predict_accuracy(fit: &PredictorFit, loss: f64, auc: f64) -> f64 {
    fit.intercept + fit.coef_loss * loss + fit.coef_auc * auc
}

/// Candidates `(id, loss, auc)` with predictions, best first; equal
/// predictions keep input order.
pub fn rank_candidates(fit: &PredictorFit, candidates: &[(String, f64, f64)]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = candidates.iter().map(|(id, l, a)| (id.clone(), predict_accuracy(fit, *l, *a))).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, loss: f64, auc: f64, acc: f64) -> ModelRecord {
        ModelRecord { model_id: id.into(), val_loss: Some(loss), auc: Some(auc), probe_acc: Some(acc), ..Default::default() }
    }

    #[test]
    fn exact_plane_is_recovered() {
        let pts = [(-0.9, 0.6), (-0.8, 0.7), (-0.95, 0.9), (-0.7, 0.55)];
        let rs: Vec<_> = pts.iter().enumerate().map(|(i, &(l, a))| rec(&i.to_string(), l, a, 1.0 - l - a)).collect();
        let f = fit_accuracy_predictor(&rs, LossFeature::ValLoss).unwrap();
        assert!((f.intercept - 1.0).abs() < 1e-10 && (f.coef_loss + 1.0).abs() < 1e-10 && (f.coef_auc + 1.0).abs() < 1e-10);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!((f.pearson_r - 1.0).abs() < 1e-12 && (f.spearman_rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_arithmetic_and_ranking() {
        let fit = PredictorFit {
            intercept: 1.0,
            coef_loss: -1.0,
            coef_auc: -1.0,
            r2: 1.0,
            pearson_r: 1.0,
            spearman_rho: 1.0,
            n_points: 4,
            loss_feature: LossFeature::ValLoss,
        };
        assert!((predict_accuracy(&fit, -0.9, 0.7) - 1.2).abs() < 1e-12);
        let ranked = rank_candidates(&fit, &[("worse".into(), -0.8, 0.8), ("better".into(), -0.9, 0.7)]);
        assert_eq!(ranked[0].0, "better");
    }

    #[test]
    fn collinear_features_are_rejected() {
        let rs: Vec<_> = (0..5).map(|i| rec("r", i as f64, 2.0 * i as f64 + 1.0, 0.1 * i as f64)).collect();
        assert!(matches!(fit_accuracy_predictor(&rs, LossFeature::ValLoss), Err(CoreError::RankDeficient(_))));
        let rs: Vec<_> = (0..5).map(|i| rec("r", 0.5, i as f64, 0.1 * i as f64)).collect();
        assert!(matches!(fit_accuracy_predictor(&rs, LossFeature::ValLoss), Err(CoreError::RankDeficient(_))));
        assert!(fit_accuracy_predictor(&rs[..2], LossFeature::ValLoss).is_err());
    }

    #[test]
    fn spearman_uses_average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 100.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn records_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut a = rec("a", -0.9, 0.7, 0.5);
        a.knn_acc = Some(0.4);
        let b = ModelRecord { model_id: "b".into(), status: "failed: boom".into(), ..Default::default() };
        write_records(&p, &[a.clone(), b.clone()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("model_id,val_loss,auc,probe_acc,"));
        assert_eq!(read_records(&p).unwrap(), vec![a, b]);
    }
}
