//! Normalized prediction error and box-plot summaries.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gp::PredictionResult;

/// Five-number summary with linear interpolation between order statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    /// Quantiles of `values` (order-insensitive). Empty input gives zeros.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            min: s[0],
            q25: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q75: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        }
    }
}

/// `p`-quantile of sorted data: position `p (n - 1)`, linear in between.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Per-die normalized errors `(mu - truth) / d_spec` and their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub deltas: Vec<f64>,
    pub d_spec: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Signed mean.
    pub mean: f64,
    /// Signed quantiles.
    pub quantiles: Quantiles,
}

impl ErrorReport {
    /// Builds a report from precomputed deltas.
    pub fn from_deltas(deltas: Vec<f64>, d_spec: f64) -> Self {
        let n = deltas.len();
        let (mut sum, mut sum_abs, mut max_abs) = (0.0, 0.0, 0.0f64);
        for &d in &deltas {
            sum += d;
            sum_abs += d.abs();
            max_abs = max_abs.max(d.abs());
        }
        let denom = if n == 0 { 1.0 } else { n as f64 };
        let quantiles = Quantiles::of(&deltas);
        Self { deltas, d_spec, mean_abs: sum_abs / denom, max_abs, mean: sum / denom, quantiles }
    }
}

/// Range of the fully measured wafer, the normalizer of every delta.
pub fn d_spec_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("reference wafer"));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let d = hi - lo;
    if !(d > 0.0) {
        return Err(Error::DegenerateSpecRange(d));
    }
    Ok(d)
}

pub fn delta_error(pred: &PredictionResult, truth: &[f64], d_spec: f64) -> Result<ErrorReport> {
    delta_error_values(&pred.means, truth, d_spec)
}

/// [`delta_error`] on a bare mean vector.
pub fn delta_error_values(means: &[f64], truth: &[f64], d_spec: f64) -> Result<ErrorReport> {
    if !(d_spec > 0.0) || !d_spec.is_finite() {
        return Err(Error::DegenerateSpecRange(d_spec));
    }
    if means.len() != truth.len() {
        return Err(Error::LengthMismatch { left: means.len(), right: truth.len() });
    }
    let deltas = means.iter().zip(truth).map(|(m, t)| (m - t) / d_spec).collect();
    Ok(ErrorReport::from_deltas(deltas, d_spec))
}

/// Box-plot row for one group of reports.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub key: alloc::string::String,
    /// Number of reports in the group.
    pub count: usize,
    pub mean: f64,
    pub mean_abs: f64,
    pub quantiles: Quantiles,
}

/// One row per key (in key order) holding the average of each statistic
/// over the reports that share the key.
pub fn summary_stats(reports: &[ErrorReport], keys: &[&str]) -> Result<Vec<SummaryRow>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("reports"));
    }
    if reports.len() != keys.len() {
        return Err(Error::LengthMismatch { left: reports.len(), right: keys.len() });
    }
    let mut grouped: BTreeMap<&str, Vec<&ErrorReport>> = BTreeMap::new();
    for (r, k) in reports.iter().zip(keys) {
        grouped.entry(k).or_default().push(r);
    }
    Ok(grouped
        .into_iter()
        .map(|(k, rs)| {
            let n = rs.len() as f64;
            let avg = |f: fn(&ErrorReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            SummaryRow {
                key: k.into(),
                count: rs.len(),
                mean: avg(|r| r.mean),
                mean_abs: avg(|r| r.mean_abs),
                quantiles: Quantiles {
                    min: avg(|r| r.quantiles.min),
                    q25: avg(|r| r.quantiles.q25),
                    median: avg(|r| r.quantiles.median),
                    q75: avg(|r| r.quantiles.q75),
                    max: avg(|r| r.quantiles.max),
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quantiles_of_hundredths() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let q = Quantiles::of(&v);
        // position p*(n-1): 24.75, 49.5, 74.25
        assert!((q.q25 - 0.2575).abs() < 1e-12);
        assert!((q.median - 0.505).abs() < 1e-12);
        assert!((q.q75 - 0.7525).abs() < 1e-12);
        assert_eq!((q.min, q.max), (0.01, 1.0));
    }

    #[test]
    fn exact_prediction_is_zero() {
        let r = delta_error_values(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap();
        assert_eq!(r.deltas, vec![0.0, 0.0]);
        assert_eq!(r.mean_abs, 0.0);
    }

    #[test]
    fn constant_offset() {
        let r = delta_error_values(&[1.1, 2.1, 3.1], &[1.0, 2.0, 3.0], 1.0).unwrap();
        for d in &r.deltas {
            assert!((d - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_spec_range() {
        assert!(matches!(delta_error_values(&[1.0], &[1.0], 0.0), Err(Error::DegenerateSpecRange(_))));
        assert!(matches!(d_spec_of(&[2.0, 2.0]), Err(Error::DegenerateSpecRange(_))));
    }

    #[test]
    fn summary_of_identical_reports() {
        let r = delta_error_values(&[0.0, 1.0, 3.0], &[0.0, 0.0, 0.0], 2.0).unwrap();
        let one = summary_stats(&[r.clone()], &["a"]).unwrap();
        assert_eq!(one[0].quantiles, r.quantiles);
        let two = summary_stats(&[r.clone(), r.clone()], &["b", "b"]).unwrap();
        assert_eq!(two[0].quantiles, r.quantiles);
        assert_eq!(two[0].mean_abs, r.mean_abs);
    }
}
