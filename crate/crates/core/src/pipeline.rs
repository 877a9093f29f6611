//! Fitted model artifact, method selection and evaluation over confidence
//! thresholds.

use std::fmt;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{Orientation, ThresholdRecord};
use crate::eul::{eul_candidates, select_proposals, EulConfig, UnknownProposal};
use crate::fmap::{self, CentroidBank, FitConfig};
use crate::fusion::{fuse_hard, fuse_score, fusion_score, FusionStrategy};
use crate::logits::{self, Granularity, LogitsConfig, LogitsMethod, LogitsThresholds};
use crate::metrics::{evaluate, EvalReport, ImageEval, MetricsConfig, Prediction};
use crate::roi_align::extract_detection_features;
use crate::sdr::SdrConfig;
use crate::tensor_io::{Detection, ImageRecord, MapSource, StrideFeatureMaps, UNKNOWN_CLASS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseMethod {
    Fmap,
    Msp,
    Energy,
    Odin,
}

impl BaseMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseMethod::Fmap => "fmap",
            BaseMethod::Msp => "msp",
            BaseMethod::Energy => "energy",
            BaseMethod::Odin => "odin",
        }
    }

    fn logits_method(self) -> Option<LogitsMethod> {
        match self {
            BaseMethod::Fmap => None,
            BaseMethod::Msp => Some(LogitsMethod::Msp),
            BaseMethod::Energy => Some(LogitsMethod::Energy),
            BaseMethod::Odin => Some(LogitsMethod::Odin),
        }
    }
}

/// One OoD method, or a fused pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MethodSpec {
    Fmap,
    Msp,
    Energy,
    Odin,
    Fusion {
        a: BaseMethod,
        b: BaseMethod,
        strategy: FusionStrategy,
    },
}

impl MethodSpec {
    pub fn validate(&self) -> Result<()> {
        if let MethodSpec::Fusion { a, b, .. } = self {
            if a == b {
                return Err(Error::Config(format!("fusion needs two different methods, got {a:?} twice")));
            }
        }
        Ok(())
    }

    pub fn bases(&self) -> Vec<BaseMethod> {
        match *self {
            MethodSpec::Fmap => vec![BaseMethod::Fmap],
            MethodSpec::Msp => vec![BaseMethod::Msp],
            MethodSpec::Energy => vec![BaseMethod::Energy],
            MethodSpec::Odin => vec![BaseMethod::Odin],
            MethodSpec::Fusion { a, b, .. } => vec![a, b],
        }
    }

    pub fn uses_features(&self) -> bool {
        self.bases().contains(&BaseMethod::Fmap)
    }

    pub fn fusion(&self) -> Option<FusionStrategy> {
        match self {
            MethodSpec::Fusion { strategy, .. } => Some(*strategy),
            _ => None,
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Fusion { a, b, .. } => write!(f, "{}+{}", a.as_str(), b.as_str()),
            other => f.write_str(other.bases()[0].as_str()),
        }
    }
}

/// Temperatures and granularity shared by the logits methods.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LogitsOptions {
    pub granularity: Granularity,
    pub energy_temperature: Option<f64>,
    pub odin_temperature: Option<f64>,
}

impl LogitsOptions {
    pub fn config(&self, method: LogitsMethod, target_tpr: f64) -> LogitsConfig {
        LogitsConfig {
            method,
            temperature: match method {
                LogitsMethod::Msp => None,
                LogitsMethod::Energy => self.energy_temperature,
                LogitsMethod::Odin => self.odin_temperature,
            },
            target_tpr,
            granularity: self.granularity,
        }
    }
}

/// Everything calibrated at fit time: the centroid bank and the thresholds
/// of every logits method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub bank: CentroidBank,
    pub logits: Vec<LogitsThresholds>,
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::Format(format!("model file: {e}")))?;
        if m.bank.cells.len() != m.bank.num_classes * m.bank.stride_count {
            return Err(Error::Format("bank cell table does not match its shape".into()));
        }
        Ok(m)
    }

    pub fn logits_for(&self, method: LogitsMethod) -> Result<&LogitsThresholds> {
        self.logits
            .iter()
            .find(|t| t.config.method == method)
            .ok_or_else(|| Error::Config(format!("model has no {method} thresholds")))
    }
}

pub fn fit_model(
    source: &impl MapSource,
    fit: &FitConfig,
    sdr: Option<&SdrConfig>,
    logits_opts: &LogitsOptions,
) -> Result<Model> {
    let bank = fmap::fit(source, fit, sdr)?;
    let logits = LogitsMethod::ALL
        .iter()
        .map(|&m| {
            logits::calibrate(
                source.images(),
                source.num_classes(),
                fit.iou_match_threshold,
                &logits_opts.config(m, fit.target_tpr),
            )
        })
        .collect::<Result<_>>()?;
    Ok(Model { bank, logits })
}

struct BaseVerdict {
    is_ood: bool,
    raw: f64,
    record: ThresholdRecord,
    orientation: Orientation,
}

fn base_verdict(model: &Model, method: BaseMethod, det: &Detection, maps: Option<&StrideFeatureMaps>) -> Result<BaseVerdict> {
    match method.logits_method() {
        None => {
            let maps = maps.ok_or_else(|| Error::Data("feature maps required".into()))?;
            let raw = extract_detection_features(maps, det, &model.bank.roi)?;
            let (v, record) = fmap::classify_features(raw, det, &model.bank)?;
            Ok(BaseVerdict {
                is_ood: v.is_ood,
                raw: v.score,
                record,
                orientation: Orientation::LowIsId,
            })
        }
        Some(m) => {
            let (v, record) = model.logits_for(m)?.classify(det)?;
            Ok(BaseVerdict {
                is_ood: v.is_ood,
                raw: v.score,
                record,
                orientation: Orientation::HighIsId,
            })
        }
    }
}

/// OoD decision for one detection and the score that ranks it among unknown
/// predictions (higher = more unknown).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub is_ood: bool,
    pub unknown_score: f64,
}

fn unknown_rank(v: &BaseVerdict) -> f64 {
    match v.orientation {
        Orientation::LowIsId => v.raw,
        Orientation::HighIsId => -v.raw,
    }
}

pub fn detection_verdict(
    model: &Model,
    spec: &MethodSpec,
    det: &Detection,
    maps: Option<&StrideFeatureMaps>,
) -> Result<DetectionVerdict> {
    match *spec {
        MethodSpec::Fusion { a, b, strategy } => {
            let va = base_verdict(model, a, det, maps)?;
            let vb = base_verdict(model, b, det, maps)?;
            let fa = fusion_score(va.raw, &va.record, va.orientation)?;
            let fb = fusion_score(vb.raw, &vb.record, vb.orientation)?;
            let is_ood = match strategy {
                FusionStrategy::Score => fuse_score(fa, fb),
                hard => fuse_hard(va.is_ood, vb.is_ood, hard)?,
            };
            Ok(DetectionVerdict {
                is_ood,
                unknown_score: -(fa + fb),
            })
        }
        single => {
            let v = base_verdict(model, single.bases()[0], det, maps)?;
            Ok(DetectionVerdict {
                is_ood: v.is_ood,
                unknown_score: unknown_rank(&v),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metrics: MetricsConfig,
    pub confidence_thresholds: Vec<f64>,
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        let t = &self.confidence_thresholds;
        if t.is_empty() {
            return Err(Error::Config("at least one confidence threshold is required".into()));
        }
        if t.iter().any(|v| !(*v > 0.0 && *v < 1.0)) || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "confidence thresholds must lie in (0, 1) and strictly ascend".into(),
            ));
        }
        Ok(())
    }
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: MetricsConfig::default(),
            confidence_thresholds: vec![0.001, 0.005, 0.01, 0.05, 0.1, 0.15],
        }
    }
}

/// Everything about one image that does not depend on the confidence
/// threshold.
struct ImageWork {
    verdicts: Vec<DetectionVerdict>,
    candidates: Vec<UnknownProposal>,
}

fn image_work(
    model: &Model,
    spec: &MethodSpec,
    eul: Option<&EulConfig>,
    source: &impl MapSource,
    index: usize,
    min_conf: f64,
) -> Result<ImageWork> {
    let record = &source.images()[index];
    let maps = if spec.uses_features() || eul.is_some() {
        Some(source.load_maps(index)?)
    } else {
        None
    };
    let verdicts = record
        .detections
        .iter()
        .map(|d| {
            if d.confidence < min_conf {
                // never kept at any threshold
                return Ok(DetectionVerdict {
                    is_ood: false,
                    unknown_score: 0.0,
                });
            }
            detection_verdict(model, spec, d, maps.as_ref())
        })
        .collect::<Result<_>>()?;
    let candidates = match (eul, &maps) {
        (Some(cfg), Some(m)) => eul_candidates(m, &model.bank, cfg)?,
        _ => Vec::new(),
    };
    Ok(ImageWork { verdicts, candidates })
}

/// Predictions of one image at confidence threshold `t`.
pub fn image_predictions(
    record: &ImageRecord,
    verdicts: &[DetectionVerdict],
    candidates: &[UnknownProposal],
    eul: Option<&EulConfig>,
    t: f64,
) -> Vec<Prediction> {
    let kept: Vec<usize> = (0..record.detections.len())
        .filter(|&i| record.detections[i].confidence >= t)
        .collect();
    let mut out: Vec<Prediction> = kept
        .iter()
        .map(|&i| {
            let d = &record.detections[i];
            if verdicts[i].is_ood {
                Prediction::new(d.bbox, UNKNOWN_CLASS, verdicts[i].unknown_score)
            } else {
                Prediction::new(d.bbox, d.class_id as i64, d.confidence)
            }
        })
        .collect();
    if let Some(cfg) = eul {
        let dets: Vec<&Detection> = kept.iter().map(|&i| &record.detections[i]).collect();
        out.extend(
            select_proposals(candidates, &dets, cfg)
                .into_iter()
                .map(|p| Prediction::new(p.bbox, UNKNOWN_CLASS, p.pseudo_confidence())),
        );
    }
    out
}

/// Reports for every confidence threshold of `opts`, in order.
pub fn evaluate_method(
    source: &impl MapSource,
    model: &Model,
    spec: &MethodSpec,
    eul: Option<&EulConfig>,
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    spec.validate()?;
    opts.validate()?;
    if let Some(e) = eul {
        e.validate()?;
    }
    if source.num_classes() != model.bank.num_classes || source.stride_count() != model.bank.stride_count {
        return Err(Error::Config(format!(
            "dataset has {} classes and {} strides but the model was fitted on {} and {}",
            source.num_classes(),
            source.stride_count(),
            model.bank.num_classes,
            model.bank.stride_count
        )));
    }
    let min_conf = opts.confidence_thresholds[0];
    let work: Vec<ImageWork> = (0..source.images().len())
        .into_par_iter()
        .map(|i| image_work(model, spec, eul, source, i, min_conf))
        .collect::<Result<_>>()?;
    if work.iter().all(|w| w.verdicts.is_empty()) {
        warn!("no detections in the evaluation set");
    }
    Ok(opts
        .confidence_thresholds
        .iter()
        .map(|&t| {
            let evals: Vec<ImageEval> = source
                .images()
                .iter()
                .zip(&work)
                .map(|(rec, w)| ImageEval {
                    predictions: image_predictions(rec, &w.verdicts, &w.candidates, eul, t),
                    ground_truth: rec.ground_truth.clone(),
                })
                .collect();
            evaluate(&evals, source.num_classes(), &opts.metrics)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_in_memory, SynthConfig};

    fn small_model() -> (Model, SynthConfig) {
        let cfg = SynthConfig {
            images: 120,
            seed: 4,
            ..SynthConfig::default()
        };
        let ds = generate_in_memory(&SynthConfig {
            unknown_fraction: 0.0,
            ..cfg.clone()
        })
        .unwrap();
        let fit = FitConfig {
            min_samples_per_cell: 10,
            ..FitConfig::default()
        };
        (fit_model(&ds, &fit, None, &LogitsOptions::default()).unwrap(), cfg)
    }

    #[test]
    fn method_spec_json_shape() {
        let f = MethodSpec::Fusion {
            a: BaseMethod::Fmap,
            b: BaseMethod::Msp,
            strategy: FusionStrategy::Score,
        };
        let j = serde_json::to_string(&f).unwrap();
        assert_eq!(j, r#"{"type":"fusion","a":"fmap","b":"msp","strategy":"score"}"#);
        assert_eq!(serde_json::from_str::<MethodSpec>(&j).unwrap(), f);
        assert_eq!(serde_json::from_str::<MethodSpec>(r#"{"type":"energy"}"#).unwrap(), MethodSpec::Energy);
        assert!(MethodSpec::Fusion {
            a: BaseMethod::Msp,
            b: BaseMethod::Msp,
            strategy: FusionStrategy::And
        }
        .validate()
        .is_err());
    }

    #[test]
    fn model_round_trip_and_thresholds_finite() {
        let (model, cfg) = small_model();
        assert_eq!(model.bank.cells.len(), cfg.num_classes * cfg.stride_count());
        assert!(model.bank.cells.iter().all(|c| c.record.threshold.is_finite()));
        assert_eq!(model.logits.len(), 3);
        assert_eq!(Model::from_json(&model.to_json().unwrap()).unwrap(), model);
    }

    #[test]
    fn all_id_scene_has_no_unknown_metrics() {
        let (model, cfg) = small_model();
        let ds = generate_in_memory(&SynthConfig {
            unknown_fraction: 0.0,
            images: 20,
            seed: 77,
            ..cfg
        })
        .unwrap();
        let opts = EvalOptions {
            confidence_thresholds: vec![0.05],
            ..EvalOptions::default()
        };
        let r = &evaluate_method(&ds, &model, &MethodSpec::Fmap, None, &opts).unwrap()[0];
        assert_eq!(r.a_ose, 0);
        assert_eq!((r.u_ap, r.u_pre, r.u_rec, r.u_f1), (None, None, None, None));
        assert!(r.map_known.is_some());
    }

    #[test]
    fn fusion_and_is_stricter_than_or() {
        let (model, cfg) = small_model();
        let ds = generate_in_memory(&SynthConfig { images: 30, seed: 5, ..cfg }).unwrap();
        let spec = |strategy| MethodSpec::Fusion {
            a: BaseMethod::Fmap,
            b: BaseMethod::Energy,
            strategy,
        };
        for i in 0..ds.images().len() {
            let maps = ds.load_maps(i).unwrap();
            for d in &ds.images()[i].detections {
                let and = detection_verdict(&model, &spec(FusionStrategy::And), d, Some(&maps)).unwrap();
                let or = detection_verdict(&model, &spec(FusionStrategy::Or), d, Some(&maps)).unwrap();
                assert!(!and.is_ood || or.is_ood);
                assert_eq!(and.unknown_score, or.unknown_score);
            }
        }
    }

    #[test]
    fn thresholds_must_ascend() {
        let bad = EvalOptions {
            confidence_thresholds: vec![0.1, 0.05],
            ..EvalOptions::default()
        };
        assert!(bad.validate().is_err());
        assert!(EvalOptions::default().validate().is_ok());
    }
}
