// SPDX-License-Identifier: MIT OR Apache-2.0

//! Portfolio statistics: Sharpe ratios, the Jobson-Korkie test with
//! Memmel's correction, alpha regressions, rank correlation, and the label
//! clustering used for group attribution.

mod cluster;
mod shapley;

pub use cluster::{apply_merge_map, cluster_labels, kmeans, label_embedding, parse_merge_map, silhouette, ClusterAssignment, ClusterOptions, KMeans, LABEL_EMBEDDING_DIM};
pub use shapley::{shapley_csv, shapley_sharpe_table, significance_stars, DailyReturns, RunOutcome, ShapleyRow};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Trading days per year.
pub const ANNUALIZATION: f64 = 252.0;
/// Below this many paired observations a JK-Memmel result is flagged.
pub const MIN_JK_SAMPLE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpeReport {
    pub mean: f64,
    /// Population standard deviation of daily returns.
    pub volatility: f64,
    /// `√252 · mean / volatility`; `None` when volatility is zero.
    pub sharpe: Option<f64>,
    pub n: usize,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pop_std(x: &[f64], m: f64) -> f64 {
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

fn check_finite(x: &[f64], what: &'static str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

pub fn annualized_sharpe(returns: &[f64]) -> Result<SharpeReport> {
    if returns.len() < 2 {
        return Err(Error::invalid(format!("Sharpe needs at least 2 observations, got {}", returns.len())));
    }
    check_finite(returns, "returns")?;
    let m = mean(returns);
    let sd = pop_std(returns, m);
    Ok(SharpeReport {
        mean: m,
        volatility: sd,
        sharpe: (sd > 0.0).then(|| ANNUALIZATION.sqrt() * m / sd),
        n: returns.len(),
    })
}

/// Approximate standard error of an annualized Sharpe estimate from `n`
/// daily observations.
pub fn sharpe_standard_error(annual_sharpe: f64, n: usize) -> f64 {
    let sr = annual_sharpe / ANNUALIZATION.sqrt();
    ((1.0 + 0.5 * sr * sr) / n as f64).sqrt() * ANNUALIZATION.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// `SR_a > SR_b`.
    Greater,
    /// `SR_a < SR_b`.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JkMemmelResult {
    /// Difference of annualized Sharpe ratios, `a − b`.
    pub delta_sharpe: f64,
    pub z: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    pub n: usize,
    pub rho: f64,
    pub low_sample: bool,
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Jobson-Korkie test of `SR_a = SR_b` on paired daily returns, with
/// Memmel's variance `Θ = [2(1−ρ) + ½(SR_a² + SR_b²) − SR_a·SR_b·ρ²] / T`
/// on per-period Sharpe ratios.
pub fn jk_memmel_test(a: &[f64], b: &[f64], alternative: Alternative) -> Result<JkMemmelResult> {
    if a.len() != b.len() {
        return Err(Error::shape("jk_memmel_test", format!("{} vs {} observations", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("jk_memmel_test needs at least 2 paired observations"));
    }
    check_finite(a, "returns_a")?;
    check_finite(b, "returns_b")?;
    let t = a.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (sa, sb) = (pop_std(a, ma), pop_std(b, mb));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::Degenerate("zero-variance return series in Sharpe difference test".into()));
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / t;
    let rho = (cov / (sa * sb)).clamp(-1.0, 1.0);
    let (sra, srb) = (ma / sa, mb / sb);
    let theta = (2.0 * (1.0 - rho) + 0.5 * (sra * sra + srb * srb) - sra * srb * rho * rho) / t;
    let diff = sra - srb;
    let z = if diff == 0.0 {
        0.0
    } else if theta > 0.0 {
        diff / theta.sqrt()
    } else {
        return Err(Error::Degenerate("non-positive variance in Sharpe difference test".into()));
    };
    let n = standard_normal();
    let p_value = match alternative {
        Alternative::TwoSided => 2.0 * n.cdf(-z.abs()),
        Alternative::Greater => n.cdf(-z),
        Alternative::Less => n.cdf(z),
    }
    .clamp(0.0, 1.0);
    Ok(JkMemmelResult {
        delta_sharpe: diff * ANNUALIZATION.sqrt(),
        z,
        p_value,
        alternative,
        n: a.len(),
        rho,
        low_sample: a.len() < MIN_JK_SAMPLE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRegressionResult {
    /// Daily intercept times 252.
    pub alpha_annual: f64,
    pub alpha_daily: f64,
    pub beta: f64,
    /// HC1 standard errors (daily units for alpha).
    pub se_alpha: f64,
    pub se_beta: f64,
    /// `None` when the standard error is zero.
    pub t_alpha: Option<f64>,
    pub t_beta: Option<f64>,
    pub r_squared: f64,
    pub n: usize,
}

/// OLS of `y = α + β x + ε` with HC1 robust standard errors.
pub fn alpha_regression(y: &[f64], x: &[f64]) -> Result<AlphaRegressionResult> {
    if y.len() != x.len() {
        return Err(Error::shape("alpha_regression", format!("{} vs {} observations", y.len(), x.len())));
    }
    let n = y.len();
    if n < 3 {
        return Err(Error::invalid("alpha_regression needs at least 3 observations"));
    }
    check_finite(y, "dependent")?;
    check_finite(x, "benchmark")?;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("zero-variance benchmark in alpha regression".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - alpha - beta * a).collect();
    let ssr: f64 = resid.iter().map(|e| e * e).sum();
    // (X'X)^-1 for X = [1, x].
    let nf = n as f64;
    let sx: f64 = x.iter().sum();
    let sx2: f64 = x.iter().map(|v| v * v).sum();
    let det = nf * sx2 - sx * sx;
    let inv = [[sx2 / det, -sx / det], [-sx / det, nf / det]];
    // Meat: Σ e² x_i x_i'.
    let mut meat = [[0.0; 2]; 2];
    for (a, e) in x.iter().zip(&resid) {
        let e2 = e * e;
        meat[0][0] += e2;
        meat[0][1] += e2 * a;
        meat[1][1] += e2 * a * a;
    }
    meat[1][0] = meat[0][1];
    let mut cov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    s += inv[i][k] * meat[k][l] * inv[l][j];
                }
            }
            cov[i][j] = s * nf / (nf - 2.0);
        }
    }
    let se_alpha = cov[0][0].max(0.0).sqrt();
    let se_beta = cov[1][1].max(0.0).sqrt();
    Ok(AlphaRegressionResult {
        alpha_annual: alpha * ANNUALIZATION,
        alpha_daily: alpha,
        beta,
        se_alpha,
        se_beta,
        t_alpha: (se_alpha > 0.0).then(|| alpha / se_alpha),
        t_beta: (se_beta > 0.0).then(|| beta / se_beta),
        r_squared: if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 },
        n,
    })
}

/// Ranks starting at 1, ties get their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t approximation; `None` for `n < 3` or
    /// `|ρ| = 1`.
    pub p_value: Option<f64>,
    pub n: usize,
}

/// Spearman rank correlation; `None` if either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<Spearman> {
    let rho = pearson(&average_ranks(x), &average_ranks(y))?;
    let n = x.len();
    let p_value = (n >= 3 && rho.abs() < 1.0).then(|| {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        2.0 * dist.cdf(-t.abs())
    });
    Some(Spearman { rho, p_value, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, RngSeed};
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn sharpe_basics() {
        let r = annualized_sharpe(&[0.0; 10]).unwrap();
        assert_eq!(r.sharpe, None);
        let x = [0.01, -0.005, 0.02, 0.0];
        let r = annualized_sharpe(&x).unwrap();
        let m = 0.025 / 4.0;
        let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0).sqrt();
        assert!((r.sharpe.unwrap() - 252f64.sqrt() * m / sd).abs() < 1e-12);
        assert!(annualized_sharpe(&[1.0]).is_err());
    }

    #[test]
    fn sharpe_monte_carlo() {
        // One 100k-draw estimate has a relative standard error near 3%, so
        // the tolerance is checked on the mean of ten replicates.
        let want = 252f64.sqrt() * 0.1;
        let se = sharpe_standard_error(want, 100_000);
        let mut total = 0.0;
        for rep in 0..10 {
            let mut rng = Rng::new(RngSeed(21).derive(rep));
            let x: Vec<f64> = (0..100_000).map(|_| 0.001 + 0.01 * rng.normal()).collect();
            let s = annualized_sharpe(&x).unwrap().sharpe.unwrap();
            assert!((s - want).abs() < 4.0 * se, "{s} vs {want}");
            total += s;
        }
        let s = total / 10.0;
        assert!((s - want).abs() / want < 0.03, "{s} vs {want}");
    }

    #[test]
    fn jk_identical_series() {
        let mut rng = Rng::new(RngSeed(2));
        let x: Vec<f64> = (0..100).map(|_| 0.001 + 0.01 * rng.normal()).collect();
        let r = jk_memmel_test(&x, &x, Alternative::TwoSided).unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(jk_memmel_test(&x, &x[1..], Alternative::TwoSided).is_err());
        assert!(jk_memmel_test(&x[..10], &x[10..20], Alternative::TwoSided).unwrap().low_sample);
    }

    #[test]
    fn jk_hand_computed() {
        let a = [0.02, -0.01, 0.03, 0.00, 0.01];
        let b = [0.01, 0.00, 0.01, -0.02, 0.02];
        let r = jk_memmel_test(&a, &b, Alternative::TwoSided).unwrap();
        let ma = 0.01;
        let mb = 0.004;
        let sa = (a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / 5.0).sqrt();
        let sb = (b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / 5.0).sqrt();
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 5.0;
        let rho = cov / (sa * sb);
        let (p, q) = (ma / sa, mb / sb);
        let theta = (2.0 * (1.0 - rho) + 0.5 * (p * p + q * q) - p * q * rho * rho) / 5.0;
        assert!((r.z - (p - q) / theta.sqrt()).abs() < 1e-12);
        assert!((r.rho - rho).abs() < 1e-12);
        let g = jk_memmel_test(&a, &b, Alternative::Greater).unwrap();
        let l = jk_memmel_test(&a, &b, Alternative::Less).unwrap();
        assert!((g.p_value + l.p_value - 1.0).abs() < 1e-12);
        assert!((2.0 * g.p_value.min(l.p_value) - r.p_value).abs() < 1e-12);
    }

    #[test]
    fn alpha_closed_forms() {
        let mut rng = Rng::new(RngSeed(8));
        let x: Vec<f64> = (0..200).map(|_| 0.01 * rng.normal()).collect();
        let same = alpha_regression(&x, &x).unwrap();
        assert!(same.alpha_daily.abs() < 1e-10 && (same.beta - 1.0).abs() < 1e-10);
        assert!((same.r_squared - 1.0).abs() < 1e-10);
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = alpha_regression(&y2, &x).unwrap();
        assert!(r.alpha_daily.abs() < 1e-12 && (r.beta - 2.0).abs() < 1e-12);
        let yc: Vec<f64> = x.iter().map(|v| v + 0.003).collect();
        let r = alpha_regression(&yc, &x).unwrap();
        assert!((r.alpha_daily - 0.003).abs() < 1e-12);
        assert!((r.alpha_annual - 0.003 * 252.0).abs() < 1e-9);
        assert!(alpha_regression(&x, &vec![0.5; 200]).is_err());
    }

    #[test]
    fn alpha_hc1_matches_direct_formula() {
        let x = [0.1, -0.2, 0.3, 0.05, -0.1, 0.2];
        let y = [0.12, -0.25, 0.31, 0.0, -0.05, 0.18];
        let r = alpha_regression(&y, &x).unwrap();
        // Sandwich computed with explicit centered sums.
        let n = 6.0;
        let mx = x.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
        let e: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b - r.alpha_daily - r.beta * a).collect();
        let vb: f64 = x.iter().zip(&e).map(|(a, e)| (a - mx).powi(2) * e * e).sum::<f64>() / (sxx * sxx) * n / (n - 2.0);
        assert!((r.se_beta - vb.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap();
        assert_eq!(s.rho, 1.0);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_none());
        let s = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
        assert!(s.rho > 0.7 && s.p_value.unwrap() < 0.2);
    }

    proptest! {
        #[test]
        fn jk_antisymmetric(seed in 0u64..500) {
            let mut rng = Rng::new(RngSeed(seed));
            let a: Vec<f64> = (0..40).map(|_| 0.001 + 0.01 * rng.normal()).collect();
            let b: Vec<f64> = (0..40).map(|_| 0.01 * rng.normal()).collect();
            let ab = jk_memmel_test(&a, &b, Alternative::TwoSided).unwrap();
            let ba = jk_memmel_test(&b, &a, Alternative::TwoSided).unwrap();
            prop_assert_eq!(ab.z, -ba.z);
            prop_assert!(ab.z.signum() == ab.delta_sharpe.signum() || ab.z == 0.0);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }

        #[test]
        fn sharpe_scale_invariant(seed in 0u64..500, k in 0.1f64..10.0) {
            let mut rng = Rng::new(RngSeed(seed));
            let a: Vec<f64> = (0..50).map(|_| 0.001 + 0.01 * rng.normal()).collect();
            let b: Vec<f64> = a.iter().map(|v| v * k).collect();
            let sa = annualized_sharpe(&a).unwrap().sharpe.unwrap();
            let sb = annualized_sharpe(&b).unwrap().sharpe.unwrap();
            prop_assert!((sa - sb).abs() < 1e-9 * sa.abs().max(1.0));
        }

        #[test]
        fn alpha_self_regression(seed in 0u64..500) {
            let mut rng = Rng::new(RngSeed(seed));
            let x: Vec<f64> = (0..60).map(|_| 0.01 * rng.normal()).collect();
            let r = alpha_regression(&x, &x).unwrap();
            prop_assert!(r.alpha_daily.abs() < 1e-10 && (r.beta - 1.0).abs() < 1e-10);
        }
    }
}
