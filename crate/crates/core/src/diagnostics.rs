//! Representation extraction and dimensional-collapse measurements:
//! singular spectrum, cumulative explained variance, its AUC, and the
//! per-dimension standard deviation baseline.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ncsl_diffcore::Tensor;

use crate::datapipe::{eval_batch, Dataset, Normalize};
use crate::models::Backbone;
use crate::{CoreError, Result};

pub const REPR_MAGIC: &[u8; 4] = b"REPR";
pub const REPR_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

/// Singular values below this fraction of the largest count as zero.
pub const CLAMP_RATIO: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReprMeta {
    pub checkpoint_id: String,
    pub dataset_id: String,
    /// Class label of each row when the source dataset is labelled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

/// Row-major `N x d` float32 representation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub meta: ReprMeta,
}

impl ReprMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, meta: ReprMeta) -> Result<Self> {
        if rows * cols != data.len() || cols == 0 {
            return Err(CoreError::Invalid(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        if let Some(l) = &meta.labels {
            if l.len() != rows {
                return Err(CoreError::Invalid(format!("{} labels for {rows} rows", l.len())));
            }
        }
        Ok(Self { rows, cols, data, meta })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|&v| v as f64))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(REPR_MAGIC);
        out.extend_from_slice(&REPR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.push(0);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(serde_json::to_string(&self.meta)?.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |offset: usize, detail: String| CoreError::Corrupt { path: path.to_path_buf(), offset: offset as u64, detail };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
        }
        if &bytes[..4] != REPR_MAGIC {
            return Err(corrupt(0, "bad magic (expected REPR)".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != REPR_VERSION {
            return Err(corrupt(4, format!("unsupported version {version}")));
        }
        let (rows, cols) = (u64_at(8) as usize, u64_at(16) as usize);
        if bytes[24] != 0 {
            return Err(corrupt(24, format!("unsupported dtype code {}", bytes[24])));
        }
        let body = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .filter(|&n| n <= bytes.len() - HEADER_LEN)
            .ok_or_else(|| corrupt(bytes.len(), format!("truncated: a {rows}x{cols} float32 buffer does not fit")))?;
        let data: Vec<f32> = bytes[HEADER_LEN..HEADER_LEN + body]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let trailer = &bytes[HEADER_LEN + body..];
        let meta: ReprMeta = if trailer.is_empty() {
            ReprMeta::default()
        } else {
            serde_json::from_slice(trailer).map_err(|e| corrupt(HEADER_LEN + body, format!("bad JSON trailer: {e}")))?
        };
        ReprMatrix::new(rows, cols, data, meta).map_err(|e| corrupt(HEADER_LEN + body, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Backbone output for every image of `ds` under the evaluation transform.
/// Rows follow dataset order; the result does not depend on `batch_size`.
pub fn extract_representations(
    backbone: &dyn Backbone,
    ds: &Dataset,
    batch_size: usize,
    (resize, crop): (usize, usize),
    norm: &Normalize,
    checkpoint_id: &str,
) -> Result<ReprMatrix> {
    let input = backbone.input_shape();
    if input.channels != ds.channels || (input.height, input.width) != (crop, crop) {
        return Err(CoreError::Invalid(format!(
            "backbone expects {}x{}x{} inputs but the evaluation transform yields {}x{crop}x{crop}",
            input.channels, input.height, input.width, ds.channels
        )));
    }
    if batch_size == 0 {
        return Err(CoreError::Invalid("batch size must be positive".into()));
    }
    let d = backbone.repr_dim();
    let all: Vec<usize> = (0..ds.len()).collect();
    let parts: Vec<Tensor<f32>> = all
        .par_chunks(batch_size)
        .map(|idx| backbone.represent(&eval_batch(ds, idx, resize, crop, norm)?))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(ds.len() * d);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Invalid("backbone produced non-finite representations".into()));
    }
    let meta = ReprMeta { checkpoint_id: checkpoint_id.into(), dataset_id: ds.name.clone(), labels: Some(ds.labels.clone()) };
    ReprMatrix::new(ds.len(), d, data, meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Descending, zero-padded to the column count.
    pub values: Vec<f64>,
    pub centered: bool,
}

/// Singular values of a float64 matrix, optionally after centering each
/// column. Tall matrices are reduced by a QR factorization first, so the
/// SVD runs on a `d x d` triangle.
pub fn spectrum_of(m: &DMatrix<f64>, center: bool) -> Result<Spectrum> {
    let (n, d) = m.shape();
    if d == 0 || n == 0 {
        return Err(CoreError::Invalid("spectrum of an empty matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Invalid("matrix has non-finite entries".into()));
    }
    if center && n < 2 {
        return Err(CoreError::Invalid("centering needs at least 2 rows".into()));
    }
    if n < d {
        log::warn!("{n} rows for {d} columns: spectrum truncated at rank {n}");
    }
    let mut a = m.clone();
    if center {
        for mut col in a.column_iter_mut() {
            let mean = col.sum() / n as f64;
            col.add_scalar_mut(-mean);
        }
    }
    let mut values: Vec<f64> = if n >= 2 * d {
        a.qr().r().singular_values().iter().copied().collect()
    } else {
        a.singular_values().iter().copied().collect()
    };
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    values.sort_by(|x, y| y.total_cmp(x));
    values.resize(d, 0.0);
    Ok(Spectrum { values, centered: center })
}

pub fn singular_spectrum(m: &ReprMatrix, center: bool) -> Result<Spectrum> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Invalid("representation matrix has non-finite entries".into()));
    }
    spectrum_of(&m.to_dmatrix(), center)
}

/// `cev_j = sum_{i<=j} s_i / sum_k s_k`, after clamping values below
/// `CLAMP_RATIO * s_1` to zero.
pub fn cumulative_explained_variance(s: &Spectrum) -> Result<Vec<f64>> {
    let top = s.values.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(CoreError::Invalid("all-zero spectrum has no explained variance".into()));
    }
    let clamped: Vec<f64> = s.values.iter().map(|&v| if v < CLAMP_RATIO * top { 0.0 } else { v }).collect();
    let total: f64 = clamped.iter().sum();
    let mut acc = 0.0;
    let mut cev: Vec<f64> = clamped
        .iter()
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect();
    // Zero tail values leave the partial sum exactly at the total.
    if let Some(last) = cev.last_mut() {
        *last = 1.0;
    }
    Ok(cev)
}

/// Mean of the cumulative explained variance; in `[(d+1)/(2d), 1]`.
pub fn collapse_auc(s: &Spectrum) -> Result<f64> {
    let cev = cumulative_explained_variance(s)?;
    Ok(cev.iter().sum::<f64>() / cev.len() as f64)
}

/// Population standard deviation of each column.
pub fn per_dim_std(m: &ReprMatrix) -> Result<Vec<f64>> {
    if m.rows < 2 {
        return Err(CoreError::Invalid("per-dimension std needs at least 2 rows".into()));
    }
    let n = m.rows as f64;
    let mut mean = vec![0.0f64; m.cols];
    for i in 0..m.rows {
        for (a, &v) in mean.iter_mut().zip(m.row(i)) {
            *a += v as f64;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0f64; m.cols];
    for i in 0..m.rows {
        for ((a, &v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            *a += (v as f64 - mu).powi(2);
        }
    }
    Ok(var.into_iter().map(|v| (v / n).sqrt()).collect())
}

/// Smallest 1-based `j` with `cev_j >= tau`.
pub fn effective_rank(cev: &[f64], tau: f64) -> usize {
    cev.iter().position(|&c| c >= tau).map_or(cev.len(), |j| j + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub rows: usize,
    pub cols: usize,
    pub spectrum: Spectrum,
    pub cev: Vec<f64>,
    pub auc: f64,
    pub per_dim_std: Vec<f64>,
    pub effective_rank_90: usize,
    pub effective_rank_99: usize,
}

pub fn collapse_report(m: &ReprMatrix, center: bool) -> Result<CollapseReport> {
    let spectrum = singular_spectrum(m, center)?;
    let cev = cumulative_explained_variance(&spectrum)?;
    let auc = cev.iter().sum::<f64>() / cev.len() as f64;
    Ok(CollapseReport {
        rows: m.rows,
        cols: m.cols,
        effective_rank_90: effective_rank(&cev, 0.9),
        effective_rank_99: effective_rank(&cev, 0.99),
        per_dim_std: per_dim_std(m)?,
        spectrum,
        cev,
        auc,
    })
}

impl CollapseReport {
    /// Columns `j, sigma_j, cev_j` with 1-based `j`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["j", "sigma_j", "cev_j"])?;
        for (j, (s, c)) in self.spectrum.values.iter().zip(&self.cev).enumerate() {
            w.write_record([(j + 1).to_string(), s.to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| CoreError::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| CoreError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(v: &[f64]) -> Spectrum {
        Spectrum { values: v.to_vec(), centered: false }
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn spectrum_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]);
        assert!(close(&spectrum_of(&m, false).unwrap().values, &[4.0, 3.0]));
        let rank1 = DMatrix::from_fn(10, 5, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let s = spectrum_of(&rank1, false).unwrap().values;
        assert!(s[1..].iter().all(|&v| v <= 1e-8 * s[0]));
        let wide = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 2.0]);
        assert!(close(&spectrum_of(&wide, false).unwrap().values, &[3.0, 0.0, 0.0]));
        assert!(spectrum_of(&wide, true).is_err());
        assert!(spectrum_of(&DMatrix::from_row_slice(1, 1, &[f64::NAN]), false).is_err());
    }

    #[test]
    fn cev_and_auc_examples() {
        assert!(close(&cumulative_explained_variance(&spec(&[1.0, 0.0])).unwrap(), &[1.0, 1.0]));
        assert!(close(&cumulative_explained_variance(&spec(&[3.0, 1.0])).unwrap(), &[0.75, 1.0]));
        assert!(close(&cumulative_explained_variance(&spec(&[2.0; 4])).unwrap(), &[0.25, 0.5, 0.75, 1.0]));
        assert_eq!(collapse_auc(&spec(&[1.0, 0.0, 0.0, 0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(collapse_auc(&spec(&[1.0; 4])).unwrap(), 0.625);
        assert_eq!(collapse_auc(&spec(&[3.0, 1.0])).unwrap(), 0.875);
        assert!(collapse_auc(&spec(&[0.0, 0.0])).is_err());
        // Noise far below the top value is clamped away.
        assert_eq!(collapse_auc(&spec(&[1.0, 1e-12])).unwrap(), 1.0);
    }

    #[test]
    fn per_dim_std_examples() {
        let m = ReprMatrix::new(2, 3, vec![0.0, 5.0, 1.0, 2.0, 5.0, 3.0], ReprMeta::default()).unwrap();
        assert_eq!(per_dim_std(&m).unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn effective_rank_thresholds() {
        let cev = [0.5, 0.9, 0.99, 1.0];
        assert_eq!(effective_rank(&cev, 0.9), 2);
        assert_eq!(effective_rank(&cev, 0.99), 3);
        assert_eq!(effective_rank(&cev, 0.3), 1);
    }

    #[test]
    fn repr_file_round_trip_and_corruption() {
        let meta = ReprMeta { checkpoint_id: "ck".into(), dataset_id: "ds".into(), labels: Some(vec![1, 0]) };
        let m = ReprMatrix::new(2, 2, vec![1.0, -2.0, 0.5, 3.25], meta).unwrap();
        let bytes = m.to_bytes().unwrap();
        let p = Path::new("m.repr");
        assert_eq!(ReprMatrix::from_bytes(&bytes, p).unwrap(), m);
        match ReprMatrix::from_bytes(&bytes[..30], p) {
            Err(CoreError::Corrupt { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ReprMatrix::from_bytes(&bad, p), Err(CoreError::Corrupt { offset: 0, .. })));
    }
}
