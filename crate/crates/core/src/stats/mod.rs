//! One-sided Wilcoxon rank-sum (Mann-Whitney) and signed-rank tests.
//!
//! Ranks are handled as doubled midranks so that tied ranks stay integral
//! and the exact null distributions can be counted without rounding.

mod compare;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use compare::{
    compare_reports, compare_repro, read_repro_csv, render_comparison, write_comparison_csv, Directions,
    MetricComparison, TestKind, DEFAULT_METRICS,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: String,
    pub values: Vec<f64>,
}

impl Sample {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if values.is_empty() {
            return Err(Error::EmptySample(label));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(label));
        }
        Ok(Sample { label, values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    Less,
    Greater,
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternative::Less => "less",
            Alternative::Greater => "greater",
        })
    }
}

impl FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "less" => Ok(Alternative::Less),
            "greater" => Ok(Alternative::Greater),
            _ => Err(Error::Config(format!("alternative must be less or greater, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Exact,
    /// Normal approximation with 0.5 continuity correction.
    NormalApprox,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Exact => "exact",
            Method::NormalApprox => "normal approximation (continuity 0.5)",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankOptions {
    /// Exact p-values when the (combined) sample size is at most this.
    pub exact_threshold: usize,
    /// Overrides the size-based choice.
    pub force: Option<Method>,
}

impl Default for RankOptions {
    fn default() -> Self {
        RankOptions {
            exact_threshold: 16,
            force: None,
        }
    }
}

impl RankOptions {
    fn method_for(&self, n: usize) -> Method {
        self.force.unwrap_or(if n <= self.exact_threshold {
            Method::Exact
        } else {
            Method::NormalApprox
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTestResult {
    /// `U` of the first sample, or `W⁺` for the signed-rank test.
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
    pub alternative: Alternative,
    /// Ties were present; midranks and the tie-corrected variance were used.
    pub tie_corrected: bool,
    /// `(favourable, total)` counts behind an exact p-value.
    pub exact_fraction: Option<(u128, u128)>,
}

/// Doubled midranks of `values` (rank 1 is the smallest) and the tie-group
/// sizes.
pub fn doubled_midranks(values: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share (i+1 + j+1)/2; doubled: i + j + 2
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn tie_term(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

fn upper_normal(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    1.0 - n.cdf(z)
}

/// One-sided normal p-value for statistic `s` with the given moments.
fn normal_p(s: f64, mean: f64, var: f64, alt: Alternative) -> f64 {
    if var <= 0.0 {
        return 1.0;
    }
    let sd = var.sqrt();
    match alt {
        Alternative::Greater => upper_normal((s - mean - 0.5) / sd),
        Alternative::Less => 1.0 - upper_normal((s - mean + 0.5) / sd),
    }
    .clamp(0.0, 1.0)
}

/// Exact tail of the doubled rank-sum over all size-`n` subsets of `ranks`.
fn exact_rank_sum_tail(ranks: &[u64], n: usize, observed: u64, alt: Alternative) -> (u128, u128) {
    let max_sum: u64 = ranks.iter().sum();
    let width = max_sum as usize + 1;
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0u128; width]; n + 1];
    counts[0][0] = 1;
    for (i, &r) in ranks.iter().enumerate() {
        for k in (1..=n.min(i + 1)).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            let (prev, cur) = (&lo[k - 1], &mut hi[0]);
            for s in (r as usize..width).rev() {
                cur[s] += prev[s - r as usize];
            }
        }
    }
    let dist = &counts[n];
    let total: u128 = dist.iter().sum();
    let fav: u128 = match alt {
        Alternative::Greater => dist[observed as usize..].iter().sum(),
        Alternative::Less => dist[..=observed as usize].iter().sum(),
    };
    (fav, total)
}

/// Wilcoxon rank-sum test of whether `x` tends to be greater (or less) than
/// `y`. The statistic is `U_x = R_x − n(n+1)/2`.
pub fn rank_sum_test(x: &Sample, y: &Sample, alternative: Alternative, opts: &RankOptions) -> Result<RankTestResult> {
    let (n, m) = (x.values.len(), y.values.len());
    if n == 0 {
        return Err(Error::EmptySample(x.label.clone()));
    }
    if m == 0 {
        return Err(Error::EmptySample(y.label.clone()));
    }
    let pooled: Vec<f64> = x.values.iter().chain(&y.values).copied().collect();
    let big_n = n + m;
    let (ranks, ties) = doubled_midranks(&pooled);
    let r2: u64 = ranks[..n].iter().sum();
    let u = r2 as f64 / 2.0 - (n * (n + 1)) as f64 / 2.0;
    let tied = ties.iter().any(|&t| t > 1);
    let method = opts.method_for(big_n);
    let (p, frac) = match method {
        Method::Exact => {
            let (fav, total) = exact_rank_sum_tail(&ranks, n, r2, alternative);
            (fav as f64 / total as f64, Some((fav, total)))
        }
        Method::NormalApprox => {
            let mean = (n * m) as f64 / 2.0;
            let nf = big_n as f64;
            let var = (n * m) as f64 / 12.0 * ((nf + 1.0) - tie_term(&ties) / (nf * (nf - 1.0)));
            (normal_p(u, mean, var, alternative), None)
        }
    };
    Ok(RankTestResult {
        statistic: u,
        p_value: p,
        method,
        alternative,
        tie_corrected: tied,
        exact_fraction: frac,
    })
}

/// Wilcoxon signed-rank test on the paired differences `x − y`. Zero
/// differences are dropped; the statistic is the sum of positive ranks.
pub fn signed_rank_test(
    x: &Sample,
    y: &Sample,
    alternative: Alternative,
    opts: &RankOptions,
) -> Result<RankTestResult> {
    if x.values.len() != y.values.len() {
        return Err(Error::LengthMismatch(x.values.len(), y.values.len()));
    }
    let d: Vec<f64> = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(a, b)| a - b)
        .filter(|&v| v != 0.0)
        .collect();
    if d.is_empty() {
        return Err(Error::DegenerateDifferences);
    }
    let k = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = doubled_midranks(&abs);
    let w2: u64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let w = w2 as f64 / 2.0;
    let tied = ties.iter().any(|&t| t > 1);
    let method = opts.method_for(k);
    let (p, frac) = match method {
        Method::Exact => {
            let width = ranks.iter().sum::<u64>() as usize + 1;
            let mut counts = vec![0u128; width];
            counts[0] = 1;
            for &r in &ranks {
                for s in (r as usize..width).rev() {
                    counts[s] += counts[s - r as usize];
                }
            }
            let total: u128 = 1u128 << k;
            let fav: u128 = match alternative {
                Alternative::Greater => counts[w2 as usize..].iter().sum(),
                Alternative::Less => counts[..=w2 as usize].iter().sum(),
            };
            (fav as f64 / total as f64, Some((fav, total)))
        }
        Method::NormalApprox => {
            let kf = k as f64;
            let mean = kf * (kf + 1.0) / 4.0;
            let var = kf * (kf + 1.0) * (2.0 * kf + 1.0) / 24.0 - tie_term(&ties) / 48.0;
            (normal_p(w, mean, var, alternative), None)
        }
    };
    Ok(RankTestResult {
        statistic: w,
        p_value: p,
        method,
        alternative,
        tie_corrected: tied,
        exact_fraction: frac,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(label: &str, v: &[f64]) -> Sample {
        Sample::new(label, v.to_vec()).unwrap()
    }

    #[test]
    fn midranks_with_ties() {
        let (r, t) = doubled_midranks(&[3.0, 1.0, 3.0, 2.0]);
        // ranks 1.0→1, 2.0→2, the two 3.0s share 3.5
        assert_eq!(r, vec![7, 2, 7, 4]);
        assert_eq!(t, vec![1, 1, 2]);
    }

    #[test]
    fn fully_separated_rank_sum() {
        let r = rank_sum_test(
            &s("x", &[1.0, 2.0, 3.0]),
            &s("y", &[4.0, 5.0, 6.0]),
            Alternative::Less,
            &RankOptions::default(),
        )
        .unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.exact_fraction, Some((1, 20)));
        assert!((r.p_value - 0.05).abs() < 1e-15);
        assert_eq!(r.method, Method::Exact);
    }

    #[test]
    fn identical_samples_not_significant() {
        let x = s("x", &[0.2, 0.5, 0.5, 0.9]);
        for alt in [Alternative::Less, Alternative::Greater] {
            let r = rank_sum_test(&x, &x, alt, &RankOptions::default()).unwrap();
            assert!(r.p_value >= 0.5);
            assert!(r.tie_corrected);
        }
    }

    #[test]
    fn all_positive_differences() {
        let x = s("x", &[5.0, 6.0, 7.0, 8.0]);
        let y = s("y", &[1.0, 1.5, 2.0, 4.0]);
        let r = signed_rank_test(&x, &y, Alternative::Greater, &RankOptions::default()).unwrap();
        assert_eq!(r.statistic, 10.0);
        assert_eq!(r.exact_fraction, Some((1, 16)));
        let swapped = signed_rank_test(&y, &x, Alternative::Less, &RankOptions::default()).unwrap();
        assert_eq!(swapped.p_value, r.p_value);
    }

    #[test]
    fn degenerate_and_empty_inputs() {
        let one = s("x", &[1.0]);
        assert!(matches!(
            signed_rank_test(&one, &one, Alternative::Greater, &RankOptions::default()),
            Err(Error::DegenerateDifferences)
        ));
        assert!(Sample::new("e", vec![]).is_err());
        assert!(Sample::new("n", vec![f64::NAN]).is_err());
    }

    #[test]
    fn approximation_used_above_threshold() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64 + 0.5).collect();
        let r = rank_sum_test(&s("x", &x), &s("y", &y), Alternative::Less, &RankOptions::default()).unwrap();
        assert_eq!(r.method, Method::NormalApprox);
        assert!(r.exact_fraction.is_none());
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
    }
}
