//! Combining two OoD detectors: hard AND/OR voting and soft SCORE voting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{Orientation, ThresholdRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    And,
    Or,
    Score,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::And => "and",
            FusionStrategy::Or => "or",
            FusionStrategy::Score => "score",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(FusionStrategy::And),
            "or" => Ok(FusionStrategy::Or),
            "score" => Ok(FusionStrategy::Score),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// AND: OoD only if both say OoD. OR: OoD if either does.
pub fn fuse_hard(a_is_ood: bool, b_is_ood: bool, strategy: FusionStrategy) -> Result<bool> {
    match strategy {
        FusionStrategy::And => Ok(a_is_ood && b_is_ood),
        FusionStrategy::Or => Ok(a_is_ood || b_is_ood),
        FusionStrategy::Score => Err(Error::Config("SCORE fusion needs raw scores, not verdicts".into())),
    }
}

/// Maps a raw score to [-1, 1] around its threshold: 0 at the threshold,
/// +1 at the most-ID calibration extreme, -1 at the least-ID one, linear on
/// each side and clipped beyond.
pub fn fusion_score(raw: f64, record: &ThresholdRecord, orientation: Orientation) -> Result<f64> {
    if !(record.id_min.is_finite() && record.id_max.is_finite() && record.threshold.is_finite()) {
        return Err(Error::Fit("threshold record lacks finite ID extrema".into()));
    }
    if raw.is_nan() {
        return Err(Error::Data("NaN score".into()));
    }
    let (s, tau, best, worst) = match orientation {
        Orientation::HighIsId => (raw, record.threshold, record.id_max, record.id_min),
        Orientation::LowIsId => (-raw, -record.threshold, -record.id_min, -record.id_max),
    };
    Ok(if s == tau {
        0.0
    } else if s > tau {
        let span = best - tau;
        if span > 0.0 {
            ((s - tau) / span).min(1.0)
        } else {
            1.0
        }
    } else {
        let span = tau - worst;
        if span > 0.0 {
            (-(tau - s) / span).max(-1.0)
        } else {
            -1.0
        }
    })
}

/// Soft vote: OoD iff the summed fusion scores are not strictly positive.
pub fn fuse_score(a: f64, b: f64) -> bool {
    a + b <= 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::ThresholdSource;
    use proptest::prelude::*;

    fn rec(threshold: f64, id_min: f64, id_max: f64) -> ThresholdRecord {
        ThresholdRecord {
            threshold,
            id_min,
            id_max,
            count: 10,
            source: ThresholdSource::Cell,
        }
    }

    #[test]
    fn truth_tables() {
        let table = [
            (false, false, false, false),
            (false, true, false, true),
            (true, false, false, true),
            (true, true, true, true),
        ];
        for (a, b, and, or) in table {
            assert_eq!(fuse_hard(a, b, FusionStrategy::And).unwrap(), and);
            assert_eq!(fuse_hard(a, b, FusionStrategy::Or).unwrap(), or);
        }
        assert!(fuse_hard(true, true, FusionStrategy::Score).is_err());
    }

    #[test]
    fn pivot_extremes_and_clipping() {
        let r = rec(10.0, 0.0, 20.0);
        assert_eq!(fusion_score(10.0, &r, Orientation::LowIsId).unwrap(), 0.0);
        assert_eq!(fusion_score(0.0, &r, Orientation::LowIsId).unwrap(), 1.0);
        assert_eq!(fusion_score(-5.0, &r, Orientation::LowIsId).unwrap(), 1.0);
        assert_eq!(fusion_score(15.0, &r, Orientation::LowIsId).unwrap(), -0.5);
        assert_eq!(fusion_score(99.0, &r, Orientation::LowIsId).unwrap(), -1.0);
        assert_eq!(fusion_score(20.0, &r, Orientation::HighIsId).unwrap(), 1.0);
        assert_eq!(fusion_score(5.0, &r, Orientation::HighIsId).unwrap(), -0.5);
    }

    #[test]
    fn degenerate_spans_saturate() {
        let r = rec(1.0, 1.0, 1.0);
        assert_eq!(fusion_score(1.0, &r, Orientation::HighIsId).unwrap(), 0.0);
        assert_eq!(fusion_score(1.5, &r, Orientation::HighIsId).unwrap(), 1.0);
        assert_eq!(fusion_score(0.5, &r, Orientation::HighIsId).unwrap(), -1.0);
    }

    #[test]
    fn missing_extrema_is_fit_error() {
        let r = rec(1.0, f64::INFINITY, f64::NEG_INFINITY);
        assert!(matches!(fusion_score(1.0, &r, Orientation::LowIsId), Err(Error::Fit(_))));
    }

    #[test]
    fn score_vote_boundaries() {
        assert!(fuse_score(0.0, 0.0));
        assert!(fuse_score(0.5, -0.5));
        assert!(!fuse_score(1.0, -0.5));
        let (ra, rb) = (rec(3.0, 0.0, 9.0), rec(0.2, 0.1, 0.9));
        let a = fusion_score(3.0, &ra, Orientation::LowIsId).unwrap();
        let b = fusion_score(0.2, &rb, Orientation::HighIsId).unwrap();
        assert!(fuse_score(a, b));
    }

    proptest! {
        #[test]
        fn and_ood_implies_or_ood(a: bool, b: bool) {
            if fuse_hard(a, b, FusionStrategy::And).unwrap() {
                prop_assert!(fuse_hard(a, b, FusionStrategy::Or).unwrap());
            }
        }

        #[test]
        fn bounded_and_monotone(lo in -10.0f64..0.0, hi in 0.0f64..10.0, t in 0.0f64..1.0, x in -20.0f64..20.0, dx in 0.0f64..5.0) {
            let tau = lo + t * (hi - lo);
            let r = rec(tau, lo, hi);
            let h0 = fusion_score(x, &r, Orientation::HighIsId).unwrap();
            let h1 = fusion_score(x + dx, &r, Orientation::HighIsId).unwrap();
            prop_assert!((-1.0..=1.0).contains(&h0));
            prop_assert!(h1 >= h0);
            let l0 = fusion_score(x, &r, Orientation::LowIsId).unwrap();
            let l1 = fusion_score(x - dx, &r, Orientation::LowIsId).unwrap();
            prop_assert!(l1 >= l0);
        }

        #[test]
        fn mirrored_record_flips_orientation(lo in -10.0f64..0.0, hi in 0.0f64..10.0, t in 0.0f64..1.0, x in -20.0f64..20.0) {
            let tau = lo + t * (hi - lo);
            let r = rec(tau, lo, hi);
            let mirrored = rec(-tau, -hi, -lo);
            prop_assert_eq!(
                fusion_score(x, &r, Orientation::LowIsId).unwrap(),
                fusion_score(-x, &mirrored, Orientation::HighIsId).unwrap()
            );
            // equal spans on both sides make the map odd about the threshold
            let sym = rec(0.0, -hi.max(1e-3), hi.max(1e-3));
            let v = fusion_score(x, &sym, Orientation::HighIsId).unwrap();
            let w = fusion_score(-x, &sym, Orientation::HighIsId).unwrap();
            prop_assert!((v + w).abs() <= 1e-12);
        }
    }
}
