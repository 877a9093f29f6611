//! TPR-targeted thresholds over ID score populations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the threshold counts as in-distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Distance-like scores: ID iff `score <= threshold`.
    LowIsId,
    /// Confidence-like scores: ID iff `score >= threshold`.
    HighIsId,
}

impl Orientation {
    pub fn is_id(self, score: f64, threshold: f64) -> bool {
        match self {
            Orientation::LowIsId => score <= threshold,
            Orientation::HighIsId => score >= threshold,
        }
    }
}

/// Population a threshold was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Cell,
    Class,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub threshold: f64,
    pub id_min: f64,
    pub id_max: f64,
    pub count: usize,
    pub source: ThresholdSource,
}

impl ThresholdRecord {
    /// Calibrates on `scores` so that at least `target_tpr` of them fall on
    /// the ID side of the returned threshold.
    pub fn calibrate(
        scores: &[f64],
        target_tpr: f64,
        orientation: Orientation,
        source: ThresholdSource,
    ) -> Result<Self> {
        let threshold = match orientation {
            Orientation::LowIsId => upper_quantile(scores, target_tpr)?,
            Orientation::HighIsId => lower_quantile(scores, target_tpr)?,
        };
        let id_min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let id_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            threshold,
            id_min,
            id_max,
            count: scores.len(),
            source,
        })
    }
}

fn sorted_finite(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Fit("cannot calibrate on an empty score population".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Fit("non-finite ID score in calibration population".into()));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Linear interpolation between order statistics at position `(n - 1) p`.
pub fn linear_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_tpr(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("target_tpr must lie in (0, 1), got {p}")));
    }
    Ok(())
}

/// Threshold `t` with at least a fraction `p` of `scores` satisfying `s <= t`.
///
/// Interpolated quantile, raised to the `ceil(n p)`-th order statistic when
/// interpolation alone would fall short of the target on small samples.
pub fn upper_quantile(scores: &[f64], p: f64) -> Result<f64> {
    check_tpr(p)?;
    let v = sorted_finite(scores)?;
    let n = v.len();
    let need = ((n as f64 * p - 1e-9).ceil() as usize).clamp(1, n);
    Ok(linear_quantile(&v, p).max(v[need - 1]))
}

/// Threshold `t` with at least a fraction `p` of `scores` satisfying `s >= t`.
pub fn lower_quantile(scores: &[f64], p: f64) -> Result<f64> {
    check_tpr(p)?;
    let v = sorted_finite(scores)?;
    let n = v.len();
    let skip = ((n as f64 * (1.0 - p) + 1e-9).floor() as usize).min(n - 1);
    Ok(linear_quantile(&v, 1.0 - p).min(v[skip]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_to_hundred_at_95() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((upper_quantile(&s, 0.95).unwrap() - 95.05).abs() < 1e-9);
    }

    #[test]
    fn hundredths_lower_tail() {
        let s: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert!((lower_quantile(&s, 0.95).unwrap() - 0.0595).abs() < 1e-12);
    }

    #[test]
    fn constant_population() {
        let s = vec![0.25; 17];
        assert_eq!(upper_quantile(&s, 0.95).unwrap(), 0.25);
        assert_eq!(lower_quantile(&s, 0.95).unwrap(), 0.25);
        let r = ThresholdRecord::calibrate(&s, 0.95, Orientation::HighIsId, ThresholdSource::Cell).unwrap();
        assert!(s.iter().all(|&v| Orientation::HighIsId.is_id(v, r.threshold)));
    }

    #[test]
    fn empty_population_is_fit_error() {
        assert!(matches!(upper_quantile(&[], 0.95), Err(Error::Fit(_))));
    }

    #[test]
    fn tpr_out_of_range() {
        assert!(matches!(upper_quantile(&[1.0], 1.0), Err(Error::Config(_))));
    }

    fn distinct(seed: u64, n: usize) -> Vec<f64> {
        // distinct values without ties
        (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1_000_003) as f64 + i as f64 * 1e-7).collect()
    }

    proptest! {
        #[test]
        fn fraction_lands_in_band(seed in 0u64..10_000, n in 1usize..400, tpr in 0.5f64..0.99) {
            let s = distinct(seed, n);
            let t = upper_quantile(&s, tpr).unwrap();
            let frac = s.iter().filter(|&&v| v <= t).count() as f64 / n as f64;
            prop_assert!(frac >= tpr - 1e-12 && frac <= tpr + 1.0 / n as f64 + 1e-12);
            let t = lower_quantile(&s, tpr).unwrap();
            let frac = s.iter().filter(|&&v| v >= t).count() as f64 / n as f64;
            prop_assert!(frac >= tpr - 1e-12 && frac <= tpr + 1.0 / n as f64 + 1e-12);
        }

        #[test]
        fn monotone_in_tpr(seed in 0u64..10_000, n in 1usize..200, a in 0.5f64..0.98, d in 0.0f64..0.01) {
            let s = distinct(seed, n);
            prop_assert!(upper_quantile(&s, a + d).unwrap() >= upper_quantile(&s, a).unwrap());
            prop_assert!(lower_quantile(&s, a + d).unwrap() <= lower_quantile(&s, a).unwrap());
        }

        #[test]
        fn record_brackets_threshold(seed in 0u64..10_000, n in 1usize..200) {
            let s = distinct(seed, n);
            for o in [Orientation::LowIsId, Orientation::HighIsId] {
                let r = ThresholdRecord::calibrate(&s, 0.95, o, ThresholdSource::Global).unwrap();
                prop_assert!(r.id_min <= r.threshold && r.threshold <= r.id_max);
            }
        }
    }
}
