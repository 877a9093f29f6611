//! Feature-map characterization of correct predictions and the per-cell
//! ID/OoD decision.
//!
//! A cell is a (class, stride) pair. Fitting collects the detections that
//! match a same-class ground-truth box, extracts their RoIAlign features,
//! clusters each cell and calibrates a distance threshold per cell. At
//! inference a detection is ID iff its minimum distance to the centroids of
//! its cell does not exceed that cell's threshold.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{Orientation, ThresholdRecord, ThresholdSource};
use crate::clustering::{fit_clusters, ClusterMethod, ClusterResult, ClusterSpec};
use crate::distance::{mean_vector, Distance};
use crate::error::{Error, Result};
use crate::roi_align::{extract_detection_features, RoiAlignConfig};
use crate::sdr::{train_reducer, Reducer, SdrConfig};
use crate::tensor_io::{Detection, ImageRecord, MapSource, StrideFeatureMaps};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iou_match_threshold: f64,
    pub target_tpr: f64,
    pub distance: Distance,
    pub cluster: ClusterSpec,
    pub roi: RoiAlignConfig,
    pub min_samples_per_cell: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iou_match_threshold: 0.5,
            target_tpr: 0.95,
            distance: Distance::L2,
            cluster: ClusterSpec::default(),
            roi: RoiAlignConfig::default(),
            min_samples_per_cell: 20,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_match_threshold > 0.0 && self.iou_match_threshold < 1.0) {
            return Err(Error::Config("iou_match_threshold must lie in (0, 1)".into()));
        }
        if !(self.target_tpr > 0.0 && self.target_tpr < 1.0) {
            return Err(Error::Config("target_tpr must lie in (0, 1)".into()));
        }
        if self.min_samples_per_cell == 0 {
            return Err(Error::Config("min_samples_per_cell must be >= 1".into()));
        }
        self.cluster.validate()?;
        self.roi.validate()
    }
}

/// A detection that matched a same-class ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrectPrediction {
    pub image_index: usize,
    pub detection_index: usize,
    pub class_id: usize,
    pub stride_index: usize,
}

/// Greedy one-to-one matching of one image's detections to same-class
/// ground truth, highest confidence first. Returns matched detection indices
/// in detection order.
pub fn match_correct(image: &ImageRecord, iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..image.detections.len()).collect();
    order.sort_by(|&a, &b| {
        image.detections[b]
            .confidence
            .total_cmp(&image.detections[a].confidence)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; image.ground_truth.len()];
    let mut matched = Vec::new();
    for di in order {
        let det = &image.detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in image.ground_truth.iter().enumerate() {
            if taken[gi] || gt.class_id != det.class_id as i64 {
                continue;
            }
            let iou = det.bbox.iou(&gt.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            matched.push(di);
        }
    }
    matched.sort_unstable();
    matched
}

pub fn collect_correct_predictions(images: &[ImageRecord], iou_threshold: f64) -> Vec<CorrectPrediction> {
    images
        .iter()
        .enumerate()
        .flat_map(|(ii, img)| {
            match_correct(img, iou_threshold)
                .into_iter()
                .map(move |di| CorrectPrediction {
                    image_index: ii,
                    detection_index: di,
                    class_id: img.detections[di].class_id,
                    stride_index: img.detections[di].stride_index,
                })
        })
        .collect()
}

/// RoIAlign features of `preds`, in the order given. Images are loaded once
/// each, in parallel.
pub fn extract_features(dataset: &impl MapSource, preds: &[CorrectPrediction], roi: &RoiAlignConfig) -> Result<Vec<Vec<f64>>> {
    let mut by_image: Vec<Vec<usize>> = vec![Vec::new(); dataset.images().len()];
    for (k, p) in preds.iter().enumerate() {
        by_image[p.image_index].push(k);
    }
    let per_image: Vec<Vec<(usize, Vec<f64>)>> = by_image
        .par_iter()
        .enumerate()
        .filter(|(_, ks)| !ks.is_empty())
        .map(|(ii, ks)| {
            let maps = dataset.load_maps(ii)?;
            ks.iter()
                .map(|&k| {
                    let det = &dataset.images()[ii].detections[preds[k].detection_index];
                    Ok((k, extract_detection_features(&maps, det, roi)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); preds.len()];
    for (k, f) in per_image.into_iter().flatten() {
        out[k] = f;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub class_id: usize,
    pub stride_index: usize,
    pub centroids: Vec<Vec<f64>>,
    pub sample_count: usize,
    pub cluster_method: ClusterMethod,
    pub silhouette: Option<f64>,
    pub record: ThresholdRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    pub num_classes: usize,
    pub stride_count: usize,
    pub distance: Distance,
    pub target_tpr: f64,
    pub roi: RoiAlignConfig,
    /// Indexed by `class_id * stride_count + stride_index - 1`.
    pub cells: Vec<Cell>,
    pub class_records: Vec<Option<ThresholdRecord>>,
    pub global_record: ThresholdRecord,
    /// Per-stride reducers applied before clustering and scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reducers: Option<Vec<Reducer>>,
}

impl CentroidBank {
    pub fn cell(&self, class_id: usize, stride_index: usize) -> Result<&Cell> {
        if class_id >= self.num_classes || stride_index == 0 || stride_index > self.stride_count {
            return Err(Error::Data(format!(
                "no cell for class {class_id} at stride {stride_index}"
            )));
        }
        Ok(&self.cells[class_id * self.stride_count + stride_index - 1])
    }

    /// Applies the stride's reducer, when one was fitted.
    pub fn project(&self, features: Vec<f64>, stride_index: usize) -> Result<Vec<f64>> {
        match &self.reducers {
            Some(rs) => rs
                .get(stride_index.wrapping_sub(1))
                .ok_or_else(|| Error::Data(format!("no reducer for stride {stride_index}")))?
                .transform(&features),
            None => Ok(features),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bank: Self = serde_json::from_str(s)?;
        if bank.cells.len() != bank.num_classes * bank.stride_count {
            return Err(Error::Format("bank cell table does not match its shape".into()));
        }
        Ok(bank)
    }
}

/// Minimum distance from `f` to `centroids`; `+inf` without centroids.
pub fn min_distance(f: &[f64], centroids: &[Vec<f64>], distance: Distance) -> Result<f64> {
    let mut best = f64::INFINITY;
    for c in centroids {
        best = best.min(distance.eval(f, c)?);
    }
    Ok(best)
}

/// Distance score of already-projected features in the (class, stride) cell.
pub fn score(features: &[f64], bank: &CentroidBank, class_id: usize, stride_index: usize) -> Result<f64> {
    min_distance(features, &bank.cell(class_id, stride_index)?.centroids, bank.distance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodVerdict {
    pub score: f64,
    pub threshold: f64,
    pub is_ood: bool,
    pub method: String,
}

/// Scores a detection's raw RoIAlign features against its cell.
pub fn classify_features(
    raw: Vec<f64>,
    det: &Detection,
    bank: &CentroidBank,
) -> Result<(OodVerdict, ThresholdRecord)> {
    let f = bank.project(raw, det.stride_index)?;
    let cell = bank.cell(det.class_id, det.stride_index)?;
    let s = min_distance(&f, &cell.centroids, bank.distance)?;
    let verdict = OodVerdict {
        score: s,
        threshold: cell.record.threshold,
        is_ood: !Orientation::LowIsId.is_id(s, cell.record.threshold),
        method: "fmap".into(),
    };
    Ok((verdict, cell.record))
}

pub fn classify(det: &Detection, maps: &StrideFeatureMaps, bank: &CentroidBank) -> Result<OodVerdict> {
    let raw = extract_detection_features(maps, det, &bank.roi)?;
    classify_features(raw, det, bank).map(|(v, _)| v)
}

fn cluster_cell(points: &[Vec<f64>], spec: &ClusterSpec, distance: Distance) -> Result<ClusterResult> {
    match fit_clusters(points, spec, distance) {
        Ok(r) => Ok(r),
        Err(e @ (Error::InsufficientSamples { .. } | Error::AllNoise)) => {
            warn!("{e}; using a single centroid");
            Ok(ClusterResult {
                assignments: vec![0; points.len()],
                centroids: vec![mean_vector(points.iter().map(Vec::as_slice)).expect("nonempty cell")],
                silhouette: None,
                method_used: ClusterMethod::One,
                degenerate: false,
            })
        }
        Err(e) => Err(e),
    }
}

/// Fits reducers (optional), centroids and thresholds on the correct
/// predictions of `dataset`.
pub fn fit(dataset: &impl MapSource, cfg: &FitConfig, sdr: Option<&SdrConfig>) -> Result<CentroidBank> {
    cfg.validate()?;
    let preds = collect_correct_predictions(dataset.images(), cfg.iou_match_threshold);
    if preds.is_empty() {
        return Err(Error::Fit(
            "no detection matches a same-class ground-truth box".into(),
        ));
    }
    let features = extract_features(dataset, &preds, &cfg.roi)?;
    fit_from_features(
        dataset.num_classes(),
        dataset.stride_count(),
        &preds,
        features,
        cfg,
        sdr,
    )
}

/// Fits from features already extracted for `preds` (same order).
pub fn fit_from_features(
    num_classes: usize,
    stride_count: usize,
    preds: &[CorrectPrediction],
    mut features: Vec<Vec<f64>>,
    cfg: &FitConfig,
    sdr: Option<&SdrConfig>,
) -> Result<CentroidBank> {
    cfg.validate()?;
    if preds.is_empty() {
        return Err(Error::Fit("empty correct-prediction population".into()));
    }
    if preds.len() != features.len() {
        return Err(Error::Data("features and predictions differ in length".into()));
    }
    if let Some(p) = preds.iter().find(|p| p.class_id >= num_classes || p.stride_index == 0 || p.stride_index > stride_count) {
        return Err(Error::Data(format!(
            "prediction of class {} at stride {} lies outside the bank",
            p.class_id, p.stride_index
        )));
    }

    let reducers = match sdr {
        Some(scfg) => {
            let trained: Vec<Reducer> = (1..=stride_count)
                .into_par_iter()
                .map(|s| {
                    let idx: Vec<usize> = (0..preds.len()).filter(|&k| preds[k].stride_index == s).collect();
                    let f: Vec<Vec<f64>> = idx.iter().map(|&k| features[k].clone()).collect();
                    let l: Vec<usize> = idx.iter().map(|&k| preds[k].class_id).collect();
                    let cfg_s = SdrConfig {
                        seed: scfg.seed.wrapping_add(s as u64 - 1),
                        ..scfg.clone()
                    };
                    train_reducer(&f, &l, &cfg_s)
                })
                .collect::<Result<_>>()?;
            for (k, p) in preds.iter().enumerate() {
                features[k] = trained[p.stride_index - 1].transform(&features[k])?;
            }
            Some(trained)
        }
        None => None,
    };

    let cell_index = |c: usize, s: usize| c * stride_count + s - 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes * stride_count];
    for (k, p) in preds.iter().enumerate() {
        members[cell_index(p.class_id, p.stride_index)].push(k);
    }

    struct Fitted {
        centroids: Vec<Vec<f64>>,
        method: ClusterMethod,
        silhouette: Option<f64>,
        scores: Vec<f64>,
    }
    let fitted: Vec<Fitted> = members
        .par_iter()
        .enumerate()
        .map(|(ci, idx)| {
            if idx.is_empty() {
                return Ok(Fitted {
                    centroids: Vec::new(),
                    method: cfg.cluster.method,
                    silhouette: None,
                    scores: Vec::new(),
                });
            }
            let pts: Vec<Vec<f64>> = idx.iter().map(|&k| features[k].clone()).collect();
            let spec = ClusterSpec {
                seed: cfg.cluster.seed.wrapping_add(ci as u64),
                ..cfg.cluster.clone()
            };
            let r = cluster_cell(&pts, &spec, cfg.distance)?;
            let scores = pts
                .iter()
                .map(|p| min_distance(p, &r.centroids, cfg.distance))
                .collect::<Result<Vec<_>>>()?;
            Ok(Fitted {
                centroids: r.centroids,
                method: r.method_used,
                silhouette: r.silhouette,
                scores,
            })
        })
        .collect::<Result<_>>()?;

    let all_scores: Vec<f64> = fitted.iter().flat_map(|f| f.scores.iter().copied()).collect();
    let global_record = ThresholdRecord::calibrate(&all_scores, cfg.target_tpr, Orientation::LowIsId, ThresholdSource::Global)?;
    let class_records = (0..num_classes)
        .map(|c| {
            let pooled: Vec<f64> = (1..=stride_count)
                .flat_map(|s| fitted[cell_index(c, s)].scores.iter().copied())
                .collect();
            if pooled.len() >= cfg.min_samples_per_cell {
                ThresholdRecord::calibrate(&pooled, cfg.target_tpr, Orientation::LowIsId, ThresholdSource::Class).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::with_capacity(fitted.len());
    for (ci, f) in fitted.into_iter().enumerate() {
        let (c, s) = (ci / stride_count, ci % stride_count + 1);
        let record = if f.scores.len() >= cfg.min_samples_per_cell {
            ThresholdRecord::calibrate(&f.scores, cfg.target_tpr, Orientation::LowIsId, ThresholdSource::Cell)?
        } else {
            class_records[c].unwrap_or(global_record)
        };
        if record.source != ThresholdSource::Cell {
            info!(
                "cell (class {c}, stride {s}) has {} samples; using {:?} threshold",
                f.scores.len(),
                record.source
            );
        }
        if f.centroids.is_empty() {
            warn!("cell (class {c}, stride {s}) has no samples; its detections will be flagged OoD");
        }
        cells.push(Cell {
            class_id: c,
            stride_index: s,
            centroids: f.centroids,
            sample_count: f.scores.len(),
            cluster_method: f.method,
            silhouette: f.silhouette,
            record,
        });
    }

    Ok(CentroidBank {
        num_classes,
        stride_count,
        distance: cfg.distance,
        target_tpr: cfg.target_tpr,
        roi: cfg.roi.clone(),
        cells,
        class_records,
        global_record,
        reducers,
    })
}
