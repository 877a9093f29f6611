//! Open-world detection metrics: greedy matching, AP, unknown-class
//! precision/recall/F1/AP, A-OSE, wilderness impact and Pareto fronts.

use serde::{Deserialize, Serialize};

use crate::tensor_io::{BoundingBox, GroundTruthObject, UNKNOWN_CLASS};

/// A box emitted by the evaluated pipeline. `class_id` is [`UNKNOWN_CLASS`]
/// for boxes flagged unknown; `score` ranks boxes within their class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: i64,
    pub score: f64,
}

impl Prediction {
    pub fn new(bbox: BoundingBox, class_id: i64, score: f64) -> Self {
        Self { bbox, class_id, score }
    }

    pub fn is_unknown(&self) -> bool {
        self.class_id == UNKNOWN_CLASS
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub predictions: Vec<Prediction>,
    pub ground_truth: Vec<GroundTruthObject>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Matched ground-truth index per prediction.
    pub matched_gt: Vec<Option<usize>>,
    pub gt_covered: Vec<bool>,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn is_tp(&self, pred: usize) -> bool {
        self.matched_gt[pred].is_some()
    }
}

/// Descending-score greedy one-to-one matching. Each prediction takes the
/// unmatched ground truth of highest IoU, if that IoU reaches the threshold.
pub fn match_boxes(preds: &[(BoundingBox, f64)], gts: &[BoundingBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1).then(a.cmp(&b)));
    let mut matched_gt = vec![None; preds.len()];
    let mut gt_covered = vec![false; gts.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_covered[g] {
                continue;
            }
            let iou = preds[p].0.iou(gt);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            gt_covered[g] = true;
            matched_gt[p] = Some(g);
        }
    }
    MatchResult {
        matched_gt,
        gt_covered,
        iou_threshold,
    }
}

/// `(score, is_tp)` for every prediction of `class` and the number of
/// ground-truth objects of that class, over all images.
fn ranked_for_class(images: &[ImageEval], class: i64, iou_threshold: f64) -> (Vec<(f64, bool)>, usize) {
    let mut ranked = Vec::new();
    let mut n_gt = 0;
    for img in images {
        let preds: Vec<(BoundingBox, f64)> = img
            .predictions
            .iter()
            .filter(|p| p.class_id == class)
            .map(|p| (p.bbox, p.score))
            .collect();
        let gts: Vec<BoundingBox> = img
            .ground_truth
            .iter()
            .filter(|g| g.class_id == class)
            .map(|g| g.bbox)
            .collect();
        n_gt += gts.len();
        let m = match_boxes(&preds, &gts, iou_threshold);
        ranked.extend(preds.iter().enumerate().map(|(i, p)| (p.1, m.is_tp(i))));
    }
    (ranked, n_gt)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Non-negative fraction with overflow-checked addition.
#[derive(Clone, Copy)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    fn checked_add(self, o: Ratio) -> Option<Ratio> {
        let g = gcd(self.den, o.den);
        let den = (self.den / g).checked_mul(o.den)?;
        let num = self.num.checked_mul(o.den / g)?.checked_add(o.num.checked_mul(self.den / g)?)?;
        Some(Ratio::new(num, den))
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Every-point interpolated AP of predictions ranked by descending score.
///
/// The precision envelope is summed exactly as a fraction while it fits in
/// 128 bits, so small cases come out correctly rounded.
pub fn ap_from_ranked(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0).then(a.cmp(&b)));
    let mut tp = 0u128;
    let mut points: Vec<(u128, u128, bool)> = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            tp += 1;
        }
        points.push((tp, k as u128 + 1, ranked[i].1));
    }
    // envelope: running maximum of precision from the right
    let mut env: Vec<(u128, u128)> = vec![(0, 1); points.len()];
    let mut best = (0u128, 1u128);
    for k in (0..points.len()).rev() {
        let (t, n, _) = points[k];
        if t * best.1 > best.0 * n {
            best = (t, n);
        }
        env[k] = best;
    }
    let mut exact = Some(Ratio::new(0, 1));
    let mut approx = 0.0;
    for (k, &(_, _, is_tp)) in points.iter().enumerate() {
        if is_tp {
            let (t, n) = env[k];
            exact = exact.and_then(|acc| acc.checked_add(Ratio::new(t, n)));
            approx += t as f64 / n as f64;
        }
    }
    match exact.and_then(|r| r.den.checked_mul(n_gt as u128).map(|d| Ratio::new(r.num, d))) {
        Some(r) => r.to_f64(),
        None => approx / n_gt as f64,
    }
}

/// AP of one class over all images; `None` when the class has no ground truth.
pub fn average_precision(images: &[ImageEval], class: i64, iou_threshold: f64) -> Option<f64> {
    let (ranked, n_gt) = ranked_for_class(images, class, iou_threshold);
    (n_gt > 0).then(|| ap_from_ranked(&ranked, n_gt))
}

/// Mean AP over known classes with ground truth, and the per-class table.
pub fn mean_average_precision(images: &[ImageEval], num_classes: usize, iou_threshold: f64) -> (Option<f64>, Vec<Option<f64>>) {
    let per_class: Vec<Option<f64>> = (0..num_classes as i64)
        .map(|c| average_precision(images, c, iou_threshold))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (map, per_class)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl UnknownCounts {
    pub fn merge(self, o: UnknownCounts) -> UnknownCounts {
        UnknownCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn f1(&self) -> Option<f64> {
        Some(harmonic_mean(self.precision()?, self.recall()?))
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnknownMetrics {
    pub counts: UnknownCounts,
    pub u_ap: Option<f64>,
    pub u_pre: Option<f64>,
    pub u_rec: Option<f64>,
    pub u_f1: Option<f64>,
}

pub fn unknown_counts(img: &ImageEval, iou_threshold: f64) -> UnknownCounts {
    let preds: Vec<(BoundingBox, f64)> = img
        .predictions
        .iter()
        .filter(|p| p.is_unknown())
        .map(|p| (p.bbox, p.score))
        .collect();
    let gts: Vec<BoundingBox> = img.ground_truth.iter().filter(|g| g.is_unknown()).map(|g| g.bbox).collect();
    let m = match_boxes(&preds, &gts, iou_threshold);
    let tp = m.matched_gt.iter().filter(|g| g.is_some()).count();
    UnknownCounts {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
    }
}

pub fn unknown_metrics(images: &[ImageEval], iou_threshold: f64) -> UnknownMetrics {
    let counts = images
        .iter()
        .map(|img| unknown_counts(img, iou_threshold))
        .fold(UnknownCounts::default(), UnknownCounts::merge);
    if counts.tp + counts.fn_ == 0 {
        // no unknown ground truth: the unknown-class metrics are undefined
        return UnknownMetrics {
            counts,
            ..UnknownMetrics::default()
        };
    }
    UnknownMetrics {
        counts,
        u_ap: average_precision(images, UNKNOWN_CLASS, iou_threshold),
        u_pre: counts.precision(),
        u_rec: counts.recall(),
        u_f1: counts.f1(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AoseMode {
    /// Unknown ground-truth objects covered by a known-class prediction.
    #[default]
    GroundTruth,
    /// Known-class predictions overlapping some unknown ground truth.
    Prediction,
}

pub fn a_ose_image(img: &ImageEval, iou_threshold: f64, mode: AoseMode) -> usize {
    let known: Vec<&Prediction> = img.predictions.iter().filter(|p| p.class_id >= 0).collect();
    let unknown_gt: Vec<&GroundTruthObject> = img.ground_truth.iter().filter(|g| g.is_unknown()).collect();
    match mode {
        AoseMode::GroundTruth => unknown_gt
            .iter()
            .filter(|g| known.iter().any(|p| p.bbox.iou(&g.bbox) >= iou_threshold))
            .count(),
        AoseMode::Prediction => known
            .iter()
            .filter(|p| unknown_gt.iter().any(|g| p.bbox.iou(&g.bbox) >= iou_threshold))
            .count(),
    }
}

pub fn a_ose(images: &[ImageEval], iou_threshold: f64, mode: AoseMode) -> usize {
    images.iter().map(|img| a_ose_image(img, iou_threshold, mode)).sum()
}

/// Closed-set over open-set precision, minus one, at the score cutoff where
/// known-class recall first reaches `recall_level`. `None` when that recall
/// is never reached.
pub fn wilderness_impact(images: &[ImageEval], recall_level: f64, iou_threshold: f64) -> Option<f64> {
    // (score, image, index, is_tp, overlaps_unknown)
    let mut rows: Vec<(f64, usize, usize, bool, bool)> = Vec::new();
    let mut n_known_gt = 0usize;
    for (ii, img) in images.iter().enumerate() {
        n_known_gt += img.ground_truth.iter().filter(|g| g.class_id >= 0).count();
        let mut tp = vec![false; img.predictions.len()];
        let mut classes: Vec<i64> = img.predictions.iter().filter(|p| p.class_id >= 0).map(|p| p.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let idx: Vec<usize> = (0..img.predictions.len()).filter(|&i| img.predictions[i].class_id == c).collect();
            let preds: Vec<(BoundingBox, f64)> = idx.iter().map(|&i| (img.predictions[i].bbox, img.predictions[i].score)).collect();
            let gts: Vec<BoundingBox> = img.ground_truth.iter().filter(|g| g.class_id == c).map(|g| g.bbox).collect();
            let m = match_boxes(&preds, &gts, iou_threshold);
            for (k, &i) in idx.iter().enumerate() {
                tp[i] = m.is_tp(k);
            }
        }
        for (i, p) in img.predictions.iter().enumerate() {
            if p.class_id < 0 {
                continue;
            }
            let overlaps = img
                .ground_truth
                .iter()
                .any(|g| g.is_unknown() && p.bbox.iou(&g.bbox) >= iou_threshold);
            rows.push((p.score, ii, i, tp[i], overlaps));
        }
    }
    if n_known_gt == 0 {
        return None;
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut tp, mut fp_closed, mut total) = (0usize, 0usize, 0usize);
    for &(_, _, _, is_tp, overlaps) in &rows {
        total += 1;
        if is_tp {
            tp += 1;
        } else if !overlaps {
            fp_closed += 1;
        }
        if tp as f64 / n_known_gt as f64 >= recall_level {
            let p_closed = tp as f64 / (tp + fp_closed) as f64;
            let p_open = tp as f64 / total as f64;
            return Some(p_closed / p_open - 1.0);
        }
    }
    None
}

/// Indices of non-dominated `(map, u_f1_sum)` points (both maximised),
/// ordered by descending first objective, input order on ties.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].0.total_cmp(&points[a].0).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut best_b = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let a = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == a {
            j += 1;
        }
        let group = &order[i..j];
        let group_best = group.iter().map(|&k| points[k].1).fold(f64::NEG_INFINITY, f64::max);
        if group_best > best_b {
            keep.extend(group.iter().copied().filter(|&k| points[k].1 == group_best));
            best_b = group_best;
        }
        i = j;
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub iou_threshold: f64,
    pub wi_recall_level: f64,
    pub a_ose_mode: AoseMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            wi_recall_level: 0.8,
            a_ose_mode: AoseMode::GroundTruth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_known: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub u_ap: Option<f64>,
    pub u_pre: Option<f64>,
    pub u_rec: Option<f64>,
    pub u_f1: Option<f64>,
    pub a_ose: usize,
    pub wi: Option<f64>,
    pub counts: UnknownCounts,
}

pub fn evaluate(images: &[ImageEval], num_classes: usize, cfg: &MetricsConfig) -> EvalReport {
    let (map_known, per_class_ap) = mean_average_precision(images, num_classes, cfg.iou_threshold);
    let u = unknown_metrics(images, cfg.iou_threshold);
    EvalReport {
        map_known,
        per_class_ap,
        u_ap: u.u_ap,
        u_pre: u.u_pre,
        u_rec: u.u_rec,
        u_f1: u.u_f1,
        a_ose: a_ose(images, cfg.iou_threshold, cfg.a_ose_mode),
        wi: wilderness_impact(images, cfg.wi_recall_level, cfg.iou_threshold),
        counts: u.counts,
    }
}
