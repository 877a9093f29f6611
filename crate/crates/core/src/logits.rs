//! Post-hoc OoD scores over the detector's pre-activation class outputs.
//!
//! All three scores are confidence-like: higher means more ID.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{Orientation, ThresholdRecord, ThresholdSource};
use crate::error::{Error, Result};
use crate::fmap::{collect_correct_predictions, OodVerdict};
use crate::tensor_io::{Detection, ImageRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitsMethod {
    Msp,
    Energy,
    Odin,
}

impl LogitsMethod {
    pub const ALL: [LogitsMethod; 3] = [LogitsMethod::Msp, LogitsMethod::Energy, LogitsMethod::Odin];

    pub fn as_str(self) -> &'static str {
        match self {
            LogitsMethod::Msp => "msp",
            LogitsMethod::Energy => "energy",
            LogitsMethod::Odin => "odin",
        }
    }

    pub fn default_temperature(self) -> f64 {
        match self {
            LogitsMethod::Odin => 1000.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for LogitsMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogitsMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Ok(LogitsMethod::Msp),
            "energy" => Ok(LogitsMethod::Energy),
            "odin" => Ok(LogitsMethod::Odin),
            other => Err(Error::Config(format!("unknown logits method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Global,
    PerClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsConfig {
    pub method: LogitsMethod,
    /// Defaults to 1000 for ODIN and 1 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default = "default_tpr")]
    pub target_tpr: f64,
    #[serde(default)]
    pub granularity: Granularity,
}

fn default_tpr() -> f64 {
    0.95
}

impl LogitsConfig {
    pub fn new(method: LogitsMethod) -> Self {
        Self {
            method,
            temperature: None,
            target_tpr: default_tpr(),
            granularity: Granularity::Global,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or(self.method.default_temperature())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.temperature();
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
        if !(self.target_tpr > 0.0 && self.target_tpr < 1.0) {
            return Err(Error::Config("target_tpr must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn score(&self, logits: &[f64]) -> Result<f64> {
        match self.method {
            LogitsMethod::Msp => msp_score(logits),
            LogitsMethod::Energy => {
                let t = self.temperature();
                check_temperature(t)?;
                let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
                Ok(t * energy_score(&scaled)?)
            }
            LogitsMethod::Odin => odin_score(logits, self.temperature()),
        }
    }
}

fn check_logits(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Data("empty logits vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Data("non-finite logit".into()));
    }
    Ok(logits.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Largest softmax probability.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    let m = check_logits(logits)?;
    let denom: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    Ok(1.0 / denom)
}

/// `log sum exp(z)`, stabilised by subtracting the maximum.
pub fn energy_score(logits: &[f64]) -> Result<f64> {
    let m = check_logits(logits)?;
    Ok(m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln())
}

/// Largest softmax probability of the temperature-scaled logits.
pub fn odin_score(logits: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    msp_score(&scaled)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsThresholds {
    pub config: LogitsConfig,
    pub global: ThresholdRecord,
    /// Filled only under per-class granularity; classes without ID samples
    /// use the global record.
    #[serde(default)]
    pub per_class: Vec<Option<ThresholdRecord>>,
}

impl LogitsThresholds {
    pub fn record_for(&self, class_id: usize) -> ThresholdRecord {
        self.per_class
            .get(class_id)
            .copied()
            .flatten()
            .unwrap_or(self.global)
    }

    pub fn classify(&self, det: &Detection) -> Result<(OodVerdict, ThresholdRecord)> {
        let s = self.config.score(&det.logits)?;
        let r = self.record_for(det.class_id);
        Ok((
            OodVerdict {
                score: s,
                threshold: r.threshold,
                is_ood: !Orientation::HighIsId.is_id(s, r.threshold),
                method: self.config.method.as_str().into(),
            },
            r,
        ))
    }
}

/// Calibrates from `(class_id, score)` pairs of correct predictions.
pub fn calibrate_scores(scores: &[(usize, f64)], cfg: &LogitsConfig, num_classes: usize) -> Result<LogitsThresholds> {
    cfg.validate()?;
    let all: Vec<f64> = scores.iter().map(|&(_, s)| s).collect();
    let global = ThresholdRecord::calibrate(&all, cfg.target_tpr, Orientation::HighIsId, ThresholdSource::Global)?;
    let per_class = match cfg.granularity {
        Granularity::Global => Vec::new(),
        Granularity::PerClass => (0..num_classes)
            .map(|c| {
                let v: Vec<f64> = scores.iter().filter(|&&(k, _)| k == c).map(|&(_, s)| s).collect();
                if v.is_empty() {
                    Ok(None)
                } else {
                    ThresholdRecord::calibrate(&v, cfg.target_tpr, Orientation::HighIsId, ThresholdSource::Class)
                        .map(Some)
                }
            })
            .collect::<Result<_>>()?,
    };
    Ok(LogitsThresholds {
        config: *cfg,
        global,
        per_class,
    })
}

/// Calibrates on the same correct-prediction population used by the feature
/// fit.
pub fn calibrate(
    images: &[ImageRecord],
    num_classes: usize,
    iou_threshold: f64,
    cfg: &LogitsConfig,
) -> Result<LogitsThresholds> {
    let preds = collect_correct_predictions(images, iou_threshold);
    let scores = preds
        .iter()
        .map(|p| {
            let d = &images[p.image_index].detections[p.detection_index];
            Ok((p.class_id, cfg.score(&d.logits)?))
        })
        .collect::<Result<Vec<_>>>()?;
    calibrate_scores(&scores, cfg, num_classes)
}
