//! RoIAlign feature extraction with average pooling over bilinear samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{BoundingBox, Detection, StrideFeatureMaps, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiAlignConfig {
    /// `(height, width)` of the pooled output.
    pub output_size: (usize, usize),
    /// Bilinear samples per bin along each axis.
    pub sampling_ratio: usize,
    /// Shift box coordinates by half a pixel before sampling.
    pub aligned: bool,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self {
            output_size: (1, 1),
            sampling_ratio: 2,
            aligned: true,
        }
    }
}

impl RoiAlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::Config("roi output_size must be at least 1x1".into()));
        }
        if self.sampling_ratio == 0 {
            return Err(Error::Config("roi sampling_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// One bilinear tap: flat spatial offset and weight.
#[derive(Clone, Copy)]
struct Tap {
    offset: usize,
    weight: f64,
}

fn bilinear_taps(y: f64, x: f64, height: usize, width: usize, taps: &mut Vec<Tap>) {
    let (hf, wf) = (height as f64, width as f64);
    if y < -1.0 || y > hf || x < -1.0 || x > wf {
        return;
    }
    let mut y = y.max(0.0);
    let mut x = x.max(0.0);
    let mut y_low = y.floor() as usize;
    let mut x_low = x.floor() as usize;
    let y_high;
    let x_high;
    if y_low >= height - 1 {
        y_low = height - 1;
        y_high = y_low;
        y = y_low as f64;
    } else {
        y_high = y_low + 1;
    }
    if x_low >= width - 1 {
        x_low = width - 1;
        x_high = x_low;
        x = x_low as f64;
    } else {
        x_high = x_low + 1;
    }
    let ly = y - y_low as f64;
    let lx = x - x_low as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push(Tap { offset: y_low * width + x_low, weight: hy * hx });
    taps.push(Tap { offset: y_low * width + x_high, weight: hy * lx });
    taps.push(Tap { offset: y_high * width + x_low, weight: ly * hx });
    taps.push(Tap { offset: y_high * width + x_high, weight: ly * lx });
}

/// Pools `fmap` (C x H x W) over `bbox`, returning `C * out_h * out_w` values
/// laid out channel-major.
pub fn roi_align(
    fmap: &Tensor,
    bbox: &BoundingBox,
    spatial_scale: f64,
    cfg: &RoiAlignConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (channels, height, width) = fmap.chw()?;
    let offset = if cfg.aligned { 0.5 } else { 0.0 };
    let start_w = bbox.x_min * spatial_scale - offset;
    let start_h = bbox.y_min * spatial_scale - offset;
    let mut roi_w = bbox.x_max * spatial_scale - offset - start_w;
    let mut roi_h = bbox.y_max * spatial_scale - offset - start_h;
    if !(roi_w > 0.0 && roi_h > 0.0) {
        return Err(Error::DegenerateBox(format!(
            "{:?} maps to {roi_w} x {roi_h} at scale {spatial_scale}",
            <[f64; 4]>::from(*bbox)
        )));
    }
    if !cfg.aligned {
        roi_w = roi_w.max(1.0);
        roi_h = roi_h.max(1.0);
    }
    let (out_h, out_w) = cfg.output_size;
    let n = cfg.sampling_ratio;
    let bin_h = roi_h / out_h as f64;
    let bin_w = roi_w / out_w as f64;
    let norm = 1.0 / (n * n) as f64;
    let plane = height * width;
    let data = fmap.data();

    let mut out = vec![0.0; channels * out_h * out_w];
    let mut taps = Vec::with_capacity(4 * n * n);
    for ph in 0..out_h {
        for pw in 0..out_w {
            taps.clear();
            for iy in 0..n {
                let y = start_h + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / n as f64;
                for ix in 0..n {
                    let x = start_w + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / n as f64;
                    bilinear_taps(y, x, height, width, &mut taps);
                }
            }
            for c in 0..channels {
                let base = c * plane;
                let acc: f64 = taps
                    .iter()
                    .map(|t| t.weight * data[base + t.offset] as f64)
                    .sum();
                out[(c * out_h + ph) * out_w + pw] = acc * norm;
            }
        }
    }
    Ok(out)
}

/// Extracts the feature vector of `det` from the stride it was predicted at.
pub fn extract_detection_features(
    maps: &StrideFeatureMaps,
    det: &Detection,
    cfg: &RoiAlignConfig,
) -> Result<Vec<f64>> {
    extract_box_features(maps, &det.bbox, det.stride_index, cfg)
}

pub fn extract_box_features(
    maps: &StrideFeatureMaps,
    bbox: &BoundingBox,
    stride_index: usize,
    cfg: &RoiAlignConfig,
) -> Result<Vec<f64>> {
    let stride = maps.stride(stride_index).ok_or_else(|| {
        Error::Data(format!(
            "image {:?} has no stride {stride_index}",
            maps.image_id
        ))
    })?;
    let clipped = bbox.clip(maps.image_width as f64, maps.image_height as f64);
    roi_align(
        &stride.tensor,
        &clipped,
        1.0 / stride.downsample_factor as f64,
        cfg,
    )
}
