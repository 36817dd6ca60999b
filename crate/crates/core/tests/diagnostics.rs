use nalgebra::DMatrix;
use ncsl_core::diagnostics::{
    collapse_auc, collapse_report, cumulative_explained_variance, per_dim_std, singular_spectrum, spectrum_of, ReprMatrix, Spectrum,
};
use ncsl_testkit::{gaussian, gram_singular_values, repr, rng};
use proptest::prelude::*;
use rand::Rng;

fn assert_matches_oracle(data: &[f64], n: usize, d: usize, center: bool) {
    let m = DMatrix::from_row_slice(n, d, data);
    let got = spectrum_of(&m, center).unwrap().values;
    let want = gram_singular_values(data, n, d, center);
    assert_eq!(got.len(), d);
    let top = want[0];
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        let scale = if *w > 1e-6 * top { *w } else { top };
        assert!((g - w).abs() <= 1e-8 * scale, "{n}x{d} center={center}: sigma_{i} {g} vs oracle {w}");
    }
}

#[test]
fn spectrum_matches_gram_oracle_on_random_matrices() {
    let mut r = rng(2024);
    for case in 0..100 {
        let d = r.random_range(1..=128);
        let n = r.random_range(2..=512);
        let data = gaussian(&mut r, n, d);
        assert_matches_oracle(&data, n, d, case % 2 == 0);
    }
}

#[test]
fn fifty_by_eight_example() {
    let mut r = rng(50);
    let data = gaussian(&mut r, 50, 8);
    assert_matches_oracle(&data, 50, 8, false);
    assert_matches_oracle(&data, 50, 8, true);
}

#[test]
fn auc_endpoints_are_exact() {
    for d in [1, 2, 7, 128] {
        let mut v = vec![0.0; d];
        v[0] = 3.5;
        assert_eq!(collapse_auc(&Spectrum { values: v, centered: true }).unwrap(), 1.0);
    }
    assert_eq!(collapse_auc(&Spectrum { values: vec![1.0; 4], centered: false }).unwrap(), 0.625);
}

/// Matrix whose column `dup` copies column `src`, and a control where it is
/// replaced by an independent column of the same variance.
fn type2_pair(seed: u64, n: usize, d: usize) -> (ReprMatrix, ReprMatrix) {
    let mut r = rng(seed);
    let base = gaussian(&mut r, n, d);
    let indep = gaussian(&mut r, n, 1);
    let (src, dup) = (0, d - 1);
    let col = |m: &[f64], j: usize| (0..n).map(|i| m[i * d + j]).collect::<Vec<f64>>();
    let std = |c: &[f64]| {
        let mu = c.iter().sum::<f64>() / n as f64;
        (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let s = col(&base, src);
    let (mu_s, sd_s) = (s.iter().sum::<f64>() / n as f64, std(&s));
    let (mu_i, sd_i) = (indep.iter().sum::<f64>() / n as f64, std(&indep));
    let mut collapsed = base.clone();
    let mut control = base;
    for i in 0..n {
        collapsed[i * d + dup] = s[i];
        // same mean and population std as the copied column
        control[i * d + dup] = (indep[i] - mu_i) / sd_i * sd_s + mu_s;
    }
    (repr(n, d, &collapsed), repr(n, d, &control))
}

#[test]
fn duplicated_column_is_detected_by_auc_but_not_by_std() {
    for seed in 0..20 {
        let (collapsed, control) = type2_pair(seed, 400, 16);
        for center in [true, false] {
            let a = collapse_report(&collapsed, center).unwrap();
            let b = collapse_report(&control, center).unwrap();
            assert!(a.auc > b.auc, "seed {seed} center {center}: {} vs {}", a.auc, b.auc);
        }
        let sa = per_dim_std(&collapsed).unwrap();
        let sb = per_dim_std(&control).unwrap();
        let max_diff = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-6, "seed {seed}: std differs by {max_diff}");
    }
}

#[test]
fn rank_one_matrix_has_unit_cev() {
    // exactly representable in float32, so the stored matrix is exactly rank 1
    let v = [0.25, -1.0, 2.0, 0.5];
    let data: Vec<f64> = (0..20).flat_map(|i| v.iter().map(move |x| x * (i as f64 - 7.0))).collect();
    let s = singular_spectrum(&repr(20, 4, &data), false).unwrap();
    assert_eq!(cumulative_explained_variance(&s).unwrap(), vec![1.0; 4]);
}

fn truncated(data: &[f64], n: usize, d: usize, r: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n, d, data);
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::<f64>::zeros(n, d);
    for &k in &order[..r] {
        out += svd.singular_values[k] * u.column(k) * vt.row(k);
    }
    (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| out[(i, j)]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scale_invariance(seed in 0u64..10_000, n in 2usize..60, d in 1usize..12, k in 0.01f64..100.0) {
        let mut r = rng(seed);
        let data = gaussian(&mut r, n, d);
        let scaled: Vec<f64> = data.iter().map(|v| v * k).collect();
        for center in [true, false] {
            let a = collapse_auc(&spectrum_of(&DMatrix::from_row_slice(n, d, &data), center).unwrap()).unwrap();
            let b = collapse_auc(&spectrum_of(&DMatrix::from_row_slice(n, d, &scaled), center).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_invariance(seed in 0u64..10_000, n in 2usize..60, d in 1usize..12) {
        let mut r = rng(seed);
        let m = DMatrix::from_row_slice(n, d, &gaussian(&mut r, n, d));
        let q = DMatrix::from_row_slice(d, d, &gaussian(&mut r, d, d)).qr().q();
        let a = spectrum_of(&m, false).unwrap();
        let b = spectrum_of(&(&m * q), false).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-8 * a.values[0].max(1.0));
        }
        let (ca, cb) = (collapse_auc(&a).unwrap(), collapse_auc(&b).unwrap());
        prop_assert!((ca - cb).abs() < 1e-8);
    }

    #[test]
    fn auc_bounds_and_cev_shape(seed in 0u64..10_000, n in 2usize..60, d in 1usize..16, center in any::<bool>()) {
        let mut r = rng(seed);
        let s = spectrum_of(&DMatrix::from_row_slice(n, d, &gaussian(&mut r, n, d)), center).unwrap();
        prop_assert!(s.values.windows(2).all(|w| w[0] >= w[1]) && s.values.iter().all(|&v| v >= 0.0));
        let cev = cumulative_explained_variance(&s).unwrap();
        prop_assert!(cev.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*cev.last().unwrap(), 1.0);
        let auc = collapse_auc(&s).unwrap();
        let lo = (d as f64 + 1.0) / (2.0 * d as f64);
        prop_assert!(auc >= lo - 1e-12 && auc <= 1.0, "auc {} below {}", auc, lo);
    }

    #[test]
    fn truncation_raises_auc(seed in 0u64..10_000, n in 12usize..40, d in 3usize..8) {
        let mut r = rng(seed);
        let data = gaussian(&mut r, n, d);
        let mut prev = collapse_auc(&spectrum_of(&DMatrix::from_row_slice(n, d, &data), false).unwrap()).unwrap();
        for rank in (1..d).rev() {
            let t = truncated(&data, n, d, rank);
            let auc = collapse_auc(&spectrum_of(&DMatrix::from_row_slice(n, d, &t), false).unwrap()).unwrap();
            prop_assert!(auc > prev, "rank {}: {} not above {}", rank, auc, prev);
            prev = auc;
        }
    }
}
