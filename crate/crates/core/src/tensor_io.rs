//! On-disk dataset format: `FMAP` tensor files plus a JSON manifest.
//!
//! Tensor layout (little-endian throughout):
//!
//! ```text
//! "FMAP" | 0x01 | ndim: u8 | ndim x u32 dims | row-major f32 payload
//! ```
//!
//! The manifest references one tensor per stride for each image, with paths
//! relative to the manifest's own directory. Detections are stored before any
//! confidence filtering so that thresholds can be swept offline.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"FMAP";
pub const TENSOR_VERSION: u8 = 0x01;

/// Class id used by ground truth for objects outside the known label set.
pub const UNKNOWN_CLASS: i64 = -1;

/// Dense f32 tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Format("tensor must have at least one dimension".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!("tensor dims must be >= 1, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(channels, height, width)` of a 3-D tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::Data(format!("expected a C x H x W tensor, got shape {other:?}"))),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f32 {
        let (hh, ww) = (self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: f32) {
        let (hh, ww) = (self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w] = v;
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.ndim())
        .map_err(|_| Error::Format(format!("ndim {} does not fit in a u8", t.ndim())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 4 * t.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(ndim);
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} does not fit in a u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the header and returns `(shape, header_len)`.
fn decode_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 6 {
        return Err(Error::Format("truncated tensor header".into()));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(Error::Format("tensor must have at least one dimension".into()));
    }
    let header_len = 6 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::Format("truncated tensor dims".into()));
    }
    let shape = bytes[6..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect::<Vec<_>>();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("tensor dims must be >= 1, got {shape:?}")));
    }
    Ok((shape, header_len))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (shape, header_len) = decode_header(bytes)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor element count overflows".into()))?;
    let payload = &bytes[header_len..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads only the header and checks the file length, returning the shape.
pub fn inspect_tensor(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let mut head = [0u8; 6 + 4 * 255];
    let mut got = 0;
    while got < head.len() {
        let n = file.read(&mut head[got..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    let (shape, header_len) = decode_header(&head[..got])?;
    let count: usize = shape.iter().product();
    if len != header_len + 4 * count {
        return Err(Error::Format(format!(
            "{}: file is {len} bytes, shape {shape:?} needs {}",
            path.display(),
            header_len + 4 * count
        )));
    }
    Ok(shape)
}

/// Axis-aligned box in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.x_min * factor, self.y_min * factor, self.x_max * factor, self.y_max * factor)
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

/// One detector prediction as dumped by the exporter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
    pub stride_index: usize,
    /// Pre-activation class outputs, one per known class.
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: i64,
}

impl GroundTruthObject {
    pub fn is_unknown(&self) -> bool {
        self.class_id == UNKNOWN_CLASS
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrideEntry {
    pub stride_index: usize,
    pub downsample_factor: u32,
    pub tensor_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub strides: Vec<StrideEntry>,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub stride_count: usize,
    pub images: Vec<ImageRecord>,
}

/// One stride's feature map inside [`StrideFeatureMaps`].
#[derive(Clone, Debug, PartialEq)]
pub struct StrideMap {
    pub stride_index: usize,
    pub downsample_factor: u32,
    pub tensor: Tensor,
}

/// Per-image stack of feature maps, one per stride.
#[derive(Clone, Debug, PartialEq)]
pub struct StrideFeatureMaps {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub per_stride: Vec<StrideMap>,
}

impl StrideFeatureMaps {
    pub fn stride(&self, stride_index: usize) -> Option<&StrideMap> {
        self.per_stride.iter().find(|s| s.stride_index == stride_index)
    }

    /// The stride with the largest spatial extent.
    pub fn highest_resolution(&self) -> Option<&StrideMap> {
        self.per_stride.iter().max_by_key(|s| {
            let sh = s.tensor.shape();
            // prefer the lower stride index on ties
            (sh[sh.len() - 2] * sh[sh.len() - 1], std::cmp::Reverse(s.stride_index))
        })
    }
}

impl DatasetManifest {
    /// Checks every invariant that does not need the filesystem.
    pub fn validate_structure(&self) -> Result<()> {
        let fmt = |msg: String| Err(Error::Format(msg));
        if self.num_classes == 0 {
            return fmt("num_classes must be >= 1".into());
        }
        if self.stride_count == 0 {
            return fmt("stride_count must be >= 1".into());
        }
        let mut ids = HashSet::new();
        for (i, img) in self.images.iter().enumerate() {
            let at = format!("images[{i}] (image_id {:?})", img.image_id);
            if !ids.insert(img.image_id.as_str()) {
                return fmt(format!("{at}: duplicate image_id"));
            }
            if img.width == 0 || img.height == 0 {
                return fmt(format!("{at}.width/height: must be >= 1"));
            }
            if img.strides.len() != self.stride_count {
                return fmt(format!(
                    "{at}.strides: expected {} entries, got {}",
                    self.stride_count,
                    img.strides.len()
                ));
            }
            for (k, s) in img.strides.iter().enumerate() {
                if s.stride_index != k + 1 {
                    return fmt(format!(
                        "{at}.strides[{k}].stride_index: expected {}, got {}",
                        k + 1,
                        s.stride_index
                    ));
                }
                if s.downsample_factor == 0 {
                    return fmt(format!("{at}.strides[{k}].downsample_factor: must be >= 1"));
                }
                if k > 0 && s.downsample_factor <= img.strides[k - 1].downsample_factor {
                    return fmt(format!(
                        "{at}.strides[{k}].downsample_factor: must strictly increase with stride_index"
                    ));
                }
            }
            for (k, d) in img.detections.iter().enumerate() {
                let at = format!("{at}.detections[{k}]");
                if !d.bbox.is_valid() {
                    return fmt(format!("{at}.box: invalid box {:?}", <[f64; 4]>::from(d.bbox)));
                }
                if d.class_id >= self.num_classes {
                    return fmt(format!(
                        "{at}.class_id: {} out of range for {} classes",
                        d.class_id, self.num_classes
                    ));
                }
                if !(0.0..=1.0).contains(&d.confidence) {
                    return fmt(format!("{at}.confidence: {} not in [0, 1]", d.confidence));
                }
                if d.stride_index == 0 || d.stride_index > self.stride_count {
                    return fmt(format!(
                        "{at}.stride_index: {} not in 1..={}",
                        d.stride_index, self.stride_count
                    ));
                }
                if d.logits.len() != self.num_classes {
                    return fmt(format!(
                        "{at}.logits: length {} != num_classes {}",
                        d.logits.len(),
                        self.num_classes
                    ));
                }
                if d.logits.iter().any(|v| !v.is_finite()) {
                    return fmt(format!("{at}.logits: non-finite value"));
                }
            }
            for (k, g) in img.ground_truth.iter().enumerate() {
                let at = format!("{at}.ground_truth[{k}]");
                if !g.bbox.is_valid() {
                    return fmt(format!("{at}.box: invalid box {:?}", <[f64; 4]>::from(g.bbox)));
                }
                if g.class_id < UNKNOWN_CLASS || g.class_id >= self.num_classes as i64 {
                    return fmt(format!(
                        "{at}.class_id: {} not in -1..{}",
                        g.class_id, self.num_classes
                    ));
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced tensor exists, parses and has a
    /// consistent C x H x W layout.
    pub fn validate_tensors(&self, root: &Path) -> Result<()> {
        for img in &self.images {
            let mut prev_area = usize::MAX;
            for s in &img.strides {
                let path = root.join(&s.tensor_path);
                let shape = inspect_tensor(&path).map_err(|e| {
                    Error::Format(format!(
                        "image_id {:?}: stride {} tensor {}: {e}",
                        img.image_id, s.stride_index, s.tensor_path
                    ))
                })?;
                if shape.len() != 3 {
                    return Err(Error::Format(format!(
                        "image_id {:?}: stride {} tensor must be C x H x W, got {shape:?}",
                        img.image_id, s.stride_index
                    )));
                }
                let area = shape[1] * shape[2];
                if area > prev_area {
                    return Err(Error::Format(format!(
                        "image_id {:?}: stride {} has a larger H x W than a lower stride",
                        img.image_id, s.stride_index
                    )));
                }
                prev_area = area;
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(json: &str) -> Result<DatasetManifest> {
    let manifest: DatasetManifest =
        serde_json::from_str(json).map_err(|e| Error::Format(format!("manifest schema: {e}")))?;
    manifest.validate_structure()?;
    Ok(manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text)?;
    manifest.validate_tensors(&manifest_root(path))?;
    Ok(manifest)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// A validated manifest together with the directory its paths resolve from.
///
/// Feature maps are read on demand, one image at a time.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = load_manifest(path)?;
        Ok(Self {
            manifest,
            root: manifest_root(path),
        })
    }

    /// Wraps an in-memory manifest; tensors resolve relative to `root`.
    pub fn from_parts(manifest: DatasetManifest, root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        manifest.validate_structure()?;
        manifest.validate_tensors(&root)?;
        Ok(Self { manifest, root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.manifest.images
    }

    pub fn load_maps(&self, image_index: usize) -> Result<StrideFeatureMaps> {
        let img = self
            .manifest
            .images
            .get(image_index)
            .ok_or_else(|| Error::Data(format!("image index {image_index} out of range")))?;
        let per_stride = img
            .strides
            .iter()
            .map(|s| {
                Ok(StrideMap {
                    stride_index: s.stride_index,
                    downsample_factor: s.downsample_factor,
                    tensor: read_tensor(self.root.join(&s.tensor_path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StrideFeatureMaps {
            image_id: img.image_id.clone(),
            image_width: img.width,
            image_height: img.height,
            per_stride,
        })
    }
}

/// Anything that can hand out a manifest and per-image feature maps.
pub trait MapSource: Sync {
    fn manifest(&self) -> &DatasetManifest;
    fn load_maps(&self, image_index: usize) -> Result<StrideFeatureMaps>;

    fn images(&self) -> &[ImageRecord] {
        &self.manifest().images
    }

    fn num_classes(&self) -> usize {
        self.manifest().num_classes
    }

    fn stride_count(&self) -> usize {
        self.manifest().stride_count
    }
}

impl MapSource for Dataset {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load_maps(&self, image_index: usize) -> Result<StrideFeatureMaps> {
        Dataset::load_maps(self, image_index)
    }
}

/// A dataset held entirely in memory, one map stack per image.
#[derive(Clone, Debug)]
pub struct MemoryDataset {
    pub manifest: DatasetManifest,
    pub maps: Vec<StrideFeatureMaps>,
}

impl MemoryDataset {
    pub fn new(manifest: DatasetManifest, maps: Vec<StrideFeatureMaps>) -> Result<Self> {
        manifest.validate_structure()?;
        if maps.len() != manifest.images.len() {
            return Err(Error::Format(format!(
                "{} map stacks for {} images",
                maps.len(),
                manifest.images.len()
            )));
        }
        Ok(Self { manifest, maps })
    }
}

impl MapSource for MemoryDataset {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load_maps(&self, image_index: usize) -> Result<StrideFeatureMaps> {
        self.maps
            .get(image_index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("image index {image_index} out of range")))
    }
}
