//! Cosine k-nearest-neighbour classification of frozen representations.

use std::cmp::Ordering;

use ncsl_diffcore::gemm;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::ReprMatrix;
use crate::{CoreError, Result};

const QUERY_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub best_k: usize,
    pub accuracy: f64,
    /// `(k, accuracy)` in the order the candidates were given.
    pub per_k: Vec<(usize, f64)>,
}

fn unit_rows(m: &ReprMatrix, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(m.data.len());
    for i in 0..m.rows {
        let row = m.row(i);
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(CoreError::ZeroNorm { what: what.into(), row: i });
        }
        out.extend(row.iter().map(|&v| v as f64 / norm));
    }
    Ok(out)
}

/// Majority label among `neighbours` (most similar first); ties go to the
/// larger summed similarity, then to the lower label.
fn vote(neighbours: &[(f64, usize)], labels: &[u32]) -> u32 {
    let mut tally: Vec<(u32, usize, f64)> = Vec::new();
    for &(sim, j) in neighbours {
        let l = labels[j];
        match tally.iter_mut().find(|t| t.0 == l) {
            Some(t) => {
                t.1 += 1;
                t.2 += sim;
            }
            None => tally.push((l, 1, sim)),
        }
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)).then(b.0.cmp(&a.0)))
        .map(|t| t.0)
        .expect("k >= 1")
}

/// More similar first, then lower training index.
fn closer(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Predicted label of every query row for every `k`; `out[q][i]` belongs to `ks[i]`.
pub fn knn_predict(train: &ReprMatrix, train_labels: &[u32], queries: &ReprMatrix, ks: &[usize]) -> Result<Vec<Vec<u32>>> {
    if train.cols != queries.cols {
        return Err(CoreError::Invalid(format!("train dim {} vs query dim {}", train.cols, queries.cols)));
    }
    if train_labels.len() != train.rows {
        return Err(CoreError::Invalid(format!("{} labels for {} training rows", train_labels.len(), train.rows)));
    }
    if ks.is_empty() {
        return Err(CoreError::Invalid("no k candidates".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > train.rows) {
        return Err(CoreError::Invalid(format!("k = {k} outside 1..={}", train.rows)));
    }
    let kmax = *ks.iter().max().unwrap();
    let (n, d) = (train.rows, train.cols);
    let t = unit_rows(train, "train representations")?;
    let q = unit_rows(queries, "query representations")?;
    let blocks: Vec<Vec<Vec<u32>>> = q
        .par_chunks(QUERY_BLOCK * d)
        .map(|qb| {
            let m = qb.len() / d;
            let mut sims = vec![0.0f64; m * n];
            gemm(false, true, m, n, d, 1.0, qb, &t, 0.0, &mut sims);
            sims.chunks(n)
                .map(|row| {
                    let mut cand: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
                    if kmax < n {
                        cand.select_nth_unstable_by(kmax - 1, closer);
                        cand.truncate(kmax);
                    }
                    cand.sort_by(closer);
                    ks.iter().map(|&k| vote(&cand[..k], train_labels)).collect()
                })
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// Accuracy for every candidate `k`; the best `k` maximizes validation
/// accuracy with ties going to the smallest `k`.
pub fn knn_evaluate(
    train: &ReprMatrix,
    train_labels: &[u32],
    val: &ReprMatrix,
    val_labels: &[u32],
    ks: &[usize],
) -> Result<KnnResult> {
    if val_labels.len() != val.rows || val.rows == 0 {
        return Err(CoreError::Invalid(format!("{} labels for {} validation rows", val_labels.len(), val.rows)));
    }
    let preds = knn_predict(train, train_labels, val, ks)?;
    let per_k: Vec<(usize, f64)> = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let hits = preds.iter().zip(val_labels).filter(|(p, &l)| p[i] == l).count();
            (k, hits as f64 / val.rows as f64)
        })
        .collect();
    let &(best_k, accuracy) = per_k
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty candidates");
    Ok(KnnResult { best_k, accuracy, per_k })
}
