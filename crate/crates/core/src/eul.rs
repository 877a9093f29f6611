//! Unknown-object proposals from the highest-resolution feature map.
//!
//! The map is condensed to a per-pixel saliency (mean absolute deviation
//! across channels), binarised at one or more recursive Otsu thresholds, and
//! split into connected components whose boxes are rescaled to image
//! coordinates. Candidates are ranked by the entropy of their normalised
//! distances to the class centroids, lowest first.

use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{min_distance, CentroidBank};
use crate::roi_align::extract_box_features;
use crate::tensor_io::{BoundingBox, Detection, StrideFeatureMaps, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EulConfig {
    pub otsu_depth: usize,
    pub connectivity: Connectivity,
    pub top_k: usize,
    pub min_region_pixels: usize,
    pub suppress_iou: f64,
    /// Recursion stops on sub-populations smaller than this.
    pub min_tail_pixels: usize,
}

impl Default for EulConfig {
    fn default() -> Self {
        Self {
            otsu_depth: 2,
            connectivity: Connectivity::Eight,
            top_k: 5,
            min_region_pixels: 4,
            suppress_iou: 0.5,
            min_tail_pixels: 16,
        }
    }
}

impl EulConfig {
    pub fn validate(&self) -> Result<()> {
        if self.otsu_depth == 0 || self.top_k == 0 {
            return Err(Error::Config("otsu_depth and top_k must be >= 1".into()));
        }
        if !(self.suppress_iou > 0.0 && self.suppress_iou <= 1.0) {
            return Err(Error::Config("suppress_iou must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Row-major single-channel map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Per-pixel mean absolute deviation across channels.
pub fn saliency_map(fmap: &Tensor) -> Result<Map2> {
    let (c, h, w) = fmap.chw()?;
    if c == 1 {
        warn!("single-channel map has no channel dispersion; saliency is zero");
    }
    let mut data = vec![0.0; h * w];
    let mut column = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            for (k, v) in column.iter_mut().enumerate() {
                *v = fmap.at3(k, y, x) as f64;
            }
            let mu = column.iter().sum::<f64>() / c as f64;
            data[y * w + x] = column.iter().map(|v| (v - mu).abs()).sum::<f64>() / c as f64;
        }
    }
    Ok(Map2 { height: h, width: w, data })
}

pub const OTSU_BINS: usize = 256;

/// Histogram bin of `v` over `[lo, lo + 256 * width]`.
pub fn otsu_bin(v: f64, lo: f64, width: f64) -> usize {
    (((v - lo) / width).floor().max(0.0) as usize).min(OTSU_BINS - 1)
}

/// Maximiser of the between-class variance over a 256-bin histogram of
/// `values`, returned as the bin edge `min + k * width`; class one is bins
/// `>= k`. Ties go to the lowest edge.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    otsu_split(values).map(|(t, _)| t)
}

/// Threshold and chosen bin index.
pub fn otsu_split(values: &[f64]) -> Result<(f64, usize)> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in map".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) {
        return Err(Error::DegenerateMap);
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[otsu_bin(v, lo, width)] += 1;
    }
    let n: u64 = hist.iter().sum();
    let total: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    // Between-class variance up to the constant 1/n^2 is
    // (s0 n1 - s1 n0)^2 / (n0 n1) with s the bin-index sums. Up to 2^16
    // pixels the cross-multiplied comparison fits in 128 bits and is exact.
    let exact = n <= 1 << 16;
    let better = |(d, den): (u128, u128), (bd, bden): (u128, u128)| {
        if exact {
            d * d * bden > bd * bd * den
        } else {
            (d as f64).powi(2) / den as f64 > (bd as f64).powi(2) / bden as f64
        }
    };
    let mut best: Option<((u128, u128), usize)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let (n1, s1) = (n - n0, total - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128).unsigned_abs();
        let cand = (d, n0 as u128 * n1 as u128);
        if best.is_none_or(|(b, _)| better(cand, b)) {
            best = Some((cand, k));
        }
    }
    let (_, k) = best.ok_or(Error::DegenerateMap)?;
    Ok((lo + k as f64 * width, k))
}

/// Ascending thresholds: Otsu on the map, then repeatedly on the values at
/// or above the last threshold.
pub fn recursive_otsu(values: &[f64], depth: usize, min_tail_pixels: usize) -> Result<Vec<f64>> {
    if depth == 0 {
        return Err(Error::Config("otsu depth must be >= 1".into()));
    }
    let mut out = vec![otsu_threshold(values)?];
    let mut tail: Vec<f64> = values.to_vec();
    while out.len() < depth {
        let t = *out.last().expect("nonempty");
        tail.retain(|&v| v >= t);
        if tail.len() < min_tail_pixels {
            break;
        }
        match otsu_threshold(&tail) {
            Ok(next) => out.push(next),
            Err(Error::DegenerateMap) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn binarize(map: &Map2, threshold: f64) -> Vec<bool> {
    map.data.iter().map(|&v| v >= threshold).collect()
}

/// A labelled region: pixel count and `[min_col, min_row, max_col + 1,
/// max_row + 1]` in map cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Component {
    pub pixels: usize,
    pub min_col: usize,
    pub min_row: usize,
    pub end_col: usize,
    pub end_row: usize,
}

/// Connected components of the `true` pixels, ordered by bounding box.
pub fn connected_components(mask: &[bool], height: usize, width: usize, connectivity: Connectivity) -> Vec<Component> {
    assert_eq!(mask.len(), height * width, "mask size");
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut c = Component {
            pixels: 0,
            min_col: usize::MAX,
            min_row: usize::MAX,
            end_col: 0,
            end_row: 0,
        };
        while let Some(p) = queue.pop_front() {
            let (r, col) = (p / width, p % width);
            c.pixels += 1;
            c.min_col = c.min_col.min(col);
            c.min_row = c.min_row.min(r);
            c.end_col = c.end_col.max(col + 1);
            c.end_row = c.end_row.max(r + 1);
            for &(dr, dc) in offsets {
                let (nr, nc) = (r as isize + dr, col as isize + dc);
                if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    continue;
                }
                let q = nr as usize * width + nc as usize;
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out.push(c);
    }
    out.sort_by_key(|c| (c.min_row, c.min_col, c.end_row, c.end_col, c.pixels));
    out
}

/// Component boxes scaled by `downsample_factor`, small components dropped.
pub fn regions_to_boxes(
    mask: &[bool],
    height: usize,
    width: usize,
    connectivity: Connectivity,
    min_region_pixels: usize,
    downsample_factor: f64,
) -> Vec<BoundingBox> {
    connected_components(mask, height, width, connectivity)
        .into_iter()
        .filter(|c| c.pixels >= min_region_pixels)
        .map(|c| {
            BoundingBox::new(c.min_col as f64, c.min_row as f64, c.end_col as f64, c.end_row as f64)
                .scaled(downsample_factor)
        })
        .collect()
}

/// `-sum d*_c log_C d*_c` with `d* = d / sum(d)` and `0 log 0 = 0`; `None`
/// when every distance is zero.
pub fn normalized_entropy(distances: &[f64]) -> Option<f64> {
    let c = distances.len();
    let total: f64 = distances.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    if c < 2 {
        return Some(0.0);
    }
    let ln_c = (c as f64).ln();
    let h: f64 = distances
        .iter()
        .map(|&d| {
            let p = d / total;
            if p > 0.0 {
                -p * p.ln() / ln_c
            } else {
                0.0
            }
        })
        .sum();
    Some(h.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnknownProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub entropy: f64,
    /// Index of the threshold (0 = first Otsu level) that produced the box.
    pub level: usize,
}

impl UnknownProposal {
    pub fn pseudo_confidence(&self) -> f64 {
        1.0 - self.entropy
    }
}

/// Entropy of a box against every class that has centroids at `stride`.
fn box_entropy(maps: &StrideFeatureMaps, bbox: &BoundingBox, stride: usize, bank: &CentroidBank) -> Result<Option<f64>> {
    let raw = extract_box_features(maps, bbox, stride, &bank.roi)?;
    let f = bank.project(raw, stride)?;
    let mut d = Vec::with_capacity(bank.num_classes);
    for c in 0..bank.num_classes {
        let cell = bank.cell(c, stride)?;
        if !cell.centroids.is_empty() {
            d.push(min_distance(&f, &cell.centroids, bank.distance)?);
        }
    }
    if d.is_empty() {
        return Ok(None);
    }
    Ok(Some(normalized_entropy(&d).unwrap_or_else(|| {
        warn!("box {bbox:?} coincides with a centroid of every class; entropy set to 1");
        1.0
    })))
}

/// Every unsuppressed-candidate box of the image, deduplicated and ranked by
/// ascending entropy. Suppression and truncation happen in
/// [`select_proposals`].
pub fn eul_candidates(maps: &StrideFeatureMaps, bank: &CentroidBank, cfg: &EulConfig) -> Result<Vec<UnknownProposal>> {
    cfg.validate()?;
    let top = maps
        .highest_resolution()
        .ok_or_else(|| Error::Data(format!("image {:?} has no feature maps", maps.image_id)))?;
    let sal = saliency_map(&top.tensor)?;
    let thresholds = match recursive_otsu(&sal.data, cfg.otsu_depth, cfg.min_tail_pixels) {
        Ok(t) => t,
        Err(Error::DegenerateMap) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let (iw, ih) = (maps.image_width as f64, maps.image_height as f64);
    let mut boxes: Vec<(BoundingBox, usize)> = Vec::new();
    for (level, &t) in thresholds.iter().enumerate() {
        let mask = binarize(&sal, t);
        for b in regions_to_boxes(
            &mask,
            sal.height,
            sal.width,
            cfg.connectivity,
            cfg.min_region_pixels,
            top.downsample_factor as f64,
        ) {
            let b = b.clip(iw, ih);
            if b.is_valid() && !boxes.iter().any(|(o, _)| *o == b) {
                boxes.push((b, level));
            }
        }
    }
    let mut out = Vec::with_capacity(boxes.len());
    for (bbox, level) in boxes {
        match box_entropy(maps, &bbox, top.stride_index, bank) {
            Ok(Some(entropy)) => out.push(UnknownProposal { bbox, entropy, level }),
            Ok(None) => {
                warn!("no class has centroids at stride {}; EUL cannot rank proposals", top.stride_index);
                return Ok(Vec::new());
            }
            Err(Error::ZeroVector) => warn!("skipping zero-feature proposal {bbox:?}"),
            Err(e) => return Err(e),
        }
    }
    out.sort_by(|a, b| {
        a.entropy
            .total_cmp(&b.entropy)
            .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
            .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
            .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
            .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
    });
    Ok(out)
}

/// Drops candidates overlapping a detection and keeps the first `top_k`.
pub fn select_proposals(candidates: &[UnknownProposal], detections: &[&Detection], cfg: &EulConfig) -> Vec<UnknownProposal> {
    candidates
        .iter()
        .filter(|p| detections.iter().all(|d| d.bbox.iou(&p.bbox) < cfg.suppress_iou))
        .take(cfg.top_k)
        .cloned()
        .collect()
}

pub fn eul_propose(
    maps: &StrideFeatureMaps,
    detections: &[&Detection],
    bank: &CentroidBank,
    cfg: &EulConfig,
) -> Result<Vec<UnknownProposal>> {
    Ok(select_proposals(&eul_candidates(maps, bank, cfg)?, detections, cfg))
}
