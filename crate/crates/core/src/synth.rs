//! Synthetic datasets with controllable ID/OoD structure.
//!
//! Each image is tiled into square slots of twice the coarsest downsample
//! factor and every object occupies one slot. An object lives on one stride
//! and is painted as a constant patch over its box footprint, aligned to that
//! stride's grid and at least two cells wide, so a 1x1 RoIAlign of the box
//! returns the painted vector exactly.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{
    save_manifest, write_tensor, BoundingBox, DatasetManifest, Detection, GroundTruthObject, ImageRecord,
    MemoryDataset, StrideEntry, StrideFeatureMaps, StrideMap, Tensor, UNKNOWN_CLASS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub num_classes: usize,
    /// Channels per stride; its length is the stride count.
    pub channels: Vec<usize>,
    pub downsample_factors: Vec<u32>,
    pub image_width: u32,
    pub image_height: u32,
    pub images: usize,
    /// Index of the first image. Disjoint ranges under one seed give
    /// independent images from the same cluster means.
    pub first_image: usize,
    /// Inclusive range, capped by the number of slots.
    pub objects_per_image: [usize; 2],
    pub clusters_per_cell: usize,
    /// Scale of the randomly drawn cluster means.
    pub mean_scale: f64,
    /// Explicit means indexed `[stride][class][cluster][channel]`; drawn from
    /// the seed when absent.
    pub id_cluster_means: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    pub id_sigma: f64,
    /// Unknown features sit this many `id_sigma` away from a class mean.
    pub ood_shift: f64,
    pub unknown_fraction: f64,
    /// Probability that a known object's detection carries a wrong class.
    pub label_noise: f64,
    pub background_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            num_classes: 5,
            channels: vec![16, 32, 64],
            downsample_factors: vec![8, 16, 32],
            image_width: 128,
            image_height: 128,
            images: 200,
            first_image: 0,
            objects_per_image: [2, 4],
            clusters_per_cell: 1,
            mean_scale: 1.0,
            id_cluster_means: None,
            id_sigma: 0.1,
            ood_shift: 8.0,
            unknown_fraction: 0.2,
            label_noise: 0.0,
            background_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn stride_count(&self) -> usize {
        self.channels.len()
    }

    pub fn slot_size(&self) -> u32 {
        2 * self.downsample_factors.iter().copied().max().unwrap_or(1)
    }

    pub fn slot_count(&self) -> usize {
        let s = self.slot_size();
        ((self.image_width / s) * (self.image_height / s)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes < 2 {
            return bad("synthetic data needs at least 2 classes");
        }
        if self.channels.is_empty() || self.channels.len() != self.downsample_factors.len() {
            return bad("channels and downsample_factors must be nonempty and of equal length");
        }
        if self.channels.contains(&0) {
            return bad("every stride needs at least one channel");
        }
        if self.downsample_factors[0] == 0 || self.downsample_factors.windows(2).any(|w| w[1] <= w[0]) {
            return bad("downsample factors must be positive and strictly increasing");
        }
        let s = self.slot_size();
        if self.image_width % s != 0 || self.image_height % s != 0 || self.slot_count() == 0 {
            return Err(Error::Config(format!(
                "image size must be a nonzero multiple of the {s}px slot"
            )));
        }
        if self.objects_per_image[0] > self.objects_per_image[1] {
            return bad("objects_per_image must be an ordered range");
        }
        if self.clusters_per_cell == 0 {
            return bad("clusters_per_cell must be >= 1");
        }
        if !(self.id_sigma > 0.0) || !(self.ood_shift >= 0.0) || !(self.mean_scale >= 0.0) || !(self.background_sigma >= 0.0) {
            return bad("id_sigma must be positive; ood_shift, mean_scale and background_sigma non-negative");
        }
        for p in [self.unknown_fraction, self.label_noise] {
            if !(0.0..=1.0).contains(&p) {
                return bad("unknown_fraction and label_noise must lie in [0, 1]");
            }
        }
        if let Some(m) = &self.id_cluster_means {
            let ok = m.len() == self.stride_count()
                && m.iter().zip(&self.channels).all(|(per_class, &ch)| {
                    per_class.len() == self.num_classes
                        && per_class
                            .iter()
                            .all(|cl| !cl.is_empty() && cl.iter().all(|v| v.len() == ch))
                });
            if !ok {
                return bad("id_cluster_means must be [stride][class][cluster][channel] matching the config");
            }
        }
        Ok(())
    }

    /// Cluster means, explicit or drawn from the seed.
    pub fn cluster_means(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        if let Some(m) = &self.id_cluster_means {
            return m.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ 0x6d65_616e));
        self.channels
            .iter()
            .map(|&ch| {
                (0..self.num_classes)
                    .map(|_| {
                        (0..self.clusters_per_cell)
                            .map(|_| (0..ch).map(|_| self.mean_scale * normal(&mut rng)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// One generated image: its manifest record and in-memory maps.
#[derive(Clone, Debug)]
pub struct SynthImage {
    pub record: ImageRecord,
    pub maps: StrideFeatureMaps,
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:06}")
}

fn tensor_path(id: &str, stride_index: usize) -> String {
    format!("tensors/{id}_s{stride_index}.fmap")
}

struct Canvas {
    maps: Vec<Tensor>,
    factors: Vec<u32>,
}

impl Canvas {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bg = Normal::new(0.0, cfg.background_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let maps = cfg
            .channels
            .iter()
            .zip(&cfg.downsample_factors)
            .map(|(&ch, &f)| {
                let (h, w) = ((cfg.image_height / f) as usize, (cfg.image_width / f) as usize);
                let data = (0..ch * h * w).map(|_| bg.sample(rng) as f32).collect();
                Tensor::new(vec![ch, h, w], data)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            maps,
            factors: cfg.downsample_factors.clone(),
        })
    }

    /// Writes `v` over every cell of `bbox` at stride `s` (0-based).
    fn paint(&mut self, s: usize, bbox: &BoundingBox, v: &[f64]) {
        let f = self.factors[s] as f64;
        let (c0, r0) = ((bbox.x_min / f) as usize, (bbox.y_min / f) as usize);
        let (c1, r1) = ((bbox.x_max / f) as usize, (bbox.y_max / f) as usize);
        for (k, &val) in v.iter().enumerate() {
            for r in r0..r1 {
                for c in c0..c1 {
                    self.maps[s].set3(k, r, c, val as f32);
                }
            }
        }
    }

    fn finish(self, cfg: &SynthConfig, id: &str) -> StrideFeatureMaps {
        StrideFeatureMaps {
            image_id: id.into(),
            image_width: cfg.image_width,
            image_height: cfg.image_height,
            per_stride: self
                .maps
                .into_iter()
                .zip(&cfg.downsample_factors)
                .enumerate()
                .map(|(k, (tensor, &f))| StrideMap {
                    stride_index: k + 1,
                    downsample_factor: f,
                    tensor,
                })
                .collect(),
        }
    }
}

/// Grid-aligned box inside a slot at stride `s` (0-based), `margin` cells
/// clear of the slot edge, with between 2 and the available cells per axis.
fn place_box(cfg: &SynthConfig, slot: usize, s: usize, margin: u32, rng: &mut ChaCha8Rng) -> BoundingBox {
    let size = cfg.slot_size();
    let per_row = (cfg.image_width / size) as usize;
    let (sx, sy) = ((slot % per_row) as u32 * size, (slot / per_row) as u32 * size);
    let f = cfg.downsample_factors[s];
    let cells = size / f - 2 * margin;
    let axis = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(2..=cells);
        let o = margin + rng.random_range(0..=cells - n);
        (o * f, (o + n) * f)
    };
    let (x0, x1) = axis(rng);
    let (y0, y1) = axis(rng);
    BoundingBox::new((sx + x0) as f64, (sy + y0) as f64, (sx + x1) as f64, (sy + y1) as f64)
}

fn id_logits(num_classes: usize, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..num_classes)
        .map(|c| if c == class { 3.0 } else { -3.0 } + normal(rng))
        .collect()
}

/// Near-uniform logits whose maximum is moved to `class`.
fn ood_logits(num_classes: usize, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut z: Vec<f64> = (0..num_classes).map(|_| -1.5 + 0.5 * normal(rng)).collect();
    let top = (0..num_classes).max_by(|&a, &b| z[a].total_cmp(&z[b])).expect("classes");
    z.swap(top, class);
    z
}

fn feature_draw(mean: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter().map(|m| m + sigma * normal(rng)).collect()
}

fn empty_record(cfg: &SynthConfig, id: &str) -> ImageRecord {
    ImageRecord {
        image_id: id.into(),
        width: cfg.image_width,
        height: cfg.image_height,
        strides: cfg
            .downsample_factors
            .iter()
            .enumerate()
            .map(|(k, &f)| StrideEntry {
                stride_index: k + 1,
                downsample_factor: f,
                tensor_path: tensor_path(id, k + 1),
            })
            .collect(),
        detections: Vec::new(),
        ground_truth: Vec::new(),
    }
}

/// Generates image `index`; `means` comes from [`SynthConfig::cluster_means`].
pub fn generate_image(cfg: &SynthConfig, means: &[Vec<Vec<Vec<f64>>>], index: usize) -> Result<SynthImage> {
    let mut rng = image_rng(cfg.seed, index as u64);
    let id = image_id(index);
    let mut canvas = Canvas::new(cfg, &mut rng)?;
    let mut record = empty_record(cfg, &id);
    let c = cfg.num_classes;

    let mut slots: Vec<usize> = (0..cfg.slot_count()).collect();
    slots.shuffle(&mut rng);
    let lo = cfg.objects_per_image[0].min(slots.len());
    let hi = cfg.objects_per_image[1].min(slots.len());
    let n = rng.random_range(lo..=hi);

    for &slot in &slots[..n] {
        let s = rng.random_range(0..cfg.stride_count());
        let bbox = place_box(cfg, slot, s, 0, &mut rng);
        let unknown = rng.random_bool(cfg.unknown_fraction);
        let (gt_class, det_class, feature, logits) = if unknown {
            let pred = rng.random_range(0..c);
            let cl = &means[s][pred];
            let mean = &cl[rng.random_range(0..cl.len())];
            let dir = unit_vector(&mut rng, mean.len());
            let shifted: Vec<f64> = mean.iter().zip(&dir).map(|(m, d)| m + cfg.ood_shift * cfg.id_sigma * d).collect();
            let f = feature_draw(&shifted, cfg.id_sigma, &mut rng);
            (UNKNOWN_CLASS, pred, f, ood_logits(c, pred, &mut rng))
        } else {
            let class = rng.random_range(0..c);
            let cl = &means[s][class];
            let f = feature_draw(&cl[rng.random_range(0..cl.len())], cfg.id_sigma, &mut rng);
            let det_class = if rng.random_bool(cfg.label_noise) {
                (class + rng.random_range(1..c)) % c
            } else {
                class
            };
            (class as i64, det_class, f, id_logits(c, det_class, &mut rng))
        };
        canvas.paint(s, &bbox, &feature);
        record.ground_truth.push(GroundTruthObject { bbox, class_id: gt_class });
        record.detections.push(Detection {
            bbox,
            class_id: det_class,
            confidence: sigmoid(logits[det_class]),
            stride_index: s + 1,
            logits,
        });
    }
    Ok(SynthImage {
        maps: canvas.finish(cfg, &id),
        record,
    })
}

/// A scene for unknown-localization tests: known objects on the
/// highest-resolution stride, each with a covering detection, plus `blobs`
/// undetected unknown objects painted with a strongly alternating channel
/// pattern. Everything keeps one cell clear of its slot edge so regions never
/// touch.
pub fn plant_eul_scene(cfg: &SynthConfig, blobs: usize, index: usize) -> Result<SynthImage> {
    cfg.validate()?;
    let slots_total = cfg.slot_count();
    if blobs > slots_total {
        return Err(Error::Config(format!("{blobs} blobs do not fit in {slots_total} slots")));
    }
    let cells = cfg.slot_size() / cfg.downsample_factors[0];
    if cells < 4 {
        return Err(Error::Config("slots must span at least 4 cells at the finest stride".into()));
    }
    let means = cfg.cluster_means();
    let mut rng = image_rng(cfg.seed ^ 0x6575_6c00, index as u64);
    let id = format!("eul_{index:06}");
    let mut canvas = Canvas::new(cfg, &mut rng)?;
    let mut record = empty_record(cfg, &id);

    let mut slots: Vec<usize> = (0..slots_total).collect();
    slots.shuffle(&mut rng);
    let free = slots_total - blobs;
    let known = rng.random_range(cfg.objects_per_image[0].min(free)..=cfg.objects_per_image[1].min(free));
    for &slot in &slots[..known] {
        let class = rng.random_range(0..cfg.num_classes);
        let cl = &means[0][class];
        let f = feature_draw(&cl[rng.random_range(0..cl.len())], cfg.id_sigma, &mut rng);
        let bbox = place_box(cfg, slot, 0, 1, &mut rng);
        canvas.paint(0, &bbox, &f);
        let logits = id_logits(cfg.num_classes, class, &mut rng);
        record.ground_truth.push(GroundTruthObject { bbox, class_id: class as i64 });
        record.detections.push(Detection {
            bbox,
            class_id: class,
            confidence: sigmoid(logits[class]),
            stride_index: 1,
            logits,
        });
    }
    for &slot in &slots[free..] {
        let bbox = place_box(cfg, slot, 0, 1, &mut rng);
        let a = rng.random_range(2.5..3.5);
        let v: Vec<f64> = (0..cfg.channels[0]).map(|k| if k % 2 == 0 { a } else { -a }).collect();
        canvas.paint(0, &bbox, &v);
        record.ground_truth.push(GroundTruthObject {
            bbox,
            class_id: UNKNOWN_CLASS,
        });
    }
    Ok(SynthImage {
        maps: canvas.finish(cfg, &id),
        record,
    })
}

/// All images of `cfg`, in index order.
pub fn generate_images(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    let means = cfg.cluster_means();
    (cfg.first_image..cfg.first_image + cfg.images)
        .into_par_iter()
        .map(|i| generate_image(cfg, &means, i))
        .collect()
}

pub fn manifest_for(cfg: &SynthConfig, records: Vec<ImageRecord>) -> DatasetManifest {
    DatasetManifest {
        name: cfg.name.clone(),
        num_classes: cfg.num_classes,
        stride_count: cfg.stride_count(),
        images: records,
    }
}

pub fn generate_in_memory(cfg: &SynthConfig) -> Result<MemoryDataset> {
    let (records, maps) = generate_images(cfg)?.into_iter().map(|i| (i.record, i.maps)).unzip();
    MemoryDataset::new(manifest_for(cfg, records), maps)
}

/// Writes `images` under `out_dir` as `manifest.json` plus `tensors/`.
pub fn write_dataset(cfg: &SynthConfig, images: Vec<SynthImage>, out_dir: &Path) -> Result<DatasetManifest> {
    let tensors = out_dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    images.par_iter().try_for_each(|img| {
        img.record
            .strides
            .iter()
            .zip(&img.maps.per_stride)
            .try_for_each(|(entry, map)| write_tensor(out_dir.join(&entry.tensor_path), &map.tensor))
    })?;
    let manifest = manifest_for(cfg, images.into_iter().map(|i| i.record).collect());
    manifest.validate_structure()?;
    save_manifest(out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Generates the dataset described by `cfg` into `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    write_dataset(cfg, generate_images(cfg)?, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi_align::{extract_detection_features, RoiAlignConfig};
    use crate::tensor_io::{load_manifest, Dataset, MapSource};

    fn small() -> SynthConfig {
        SynthConfig {
            images: 12,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate().unwrap();
        assert_eq!(SynthConfig::default().slot_count(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SynthConfig { num_classes: 1, ..small() },
            SynthConfig { image_width: 100, ..small() },
            SynthConfig { downsample_factors: vec![16, 8, 32], ..small() },
            SynthConfig { unknown_fraction: 1.5, ..small() },
            SynthConfig { id_sigma: 0.0, ..small() },
            SynthConfig { objects_per_image: [3, 1], ..small() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&small(), dir.path()).unwrap();
        let loaded = load_manifest(dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m);
        let ds = Dataset::open(dir.path().join("manifest.json")).unwrap();
        let mem = generate_in_memory(&small()).unwrap();
        for i in 0..ds.images().len() {
            let a = MapSource::load_maps(&ds, i).unwrap();
            assert_eq!(a, mem.maps[i]);
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&small(), a.path()).unwrap();
        generate(&small(), b.path()).unwrap();
        let read = |d: &Path, rel: &str| fs::read(d.join(rel)).unwrap();
        assert_eq!(read(a.path(), "manifest.json"), read(b.path(), "manifest.json"));
        let m = load_manifest(a.path().join("manifest.json")).unwrap();
        for img in &m.images {
            for s in &img.strides {
                assert_eq!(read(a.path(), &s.tensor_path), read(b.path(), &s.tensor_path));
            }
        }
        let other = SynthConfig { seed: 10, ..small() };
        assert_ne!(generate_in_memory(&other).unwrap().manifest, generate_in_memory(&small()).unwrap().manifest);
    }

    #[test]
    fn roi_align_reproduces_painted_vector() {
        let cfg = SynthConfig {
            unknown_fraction: 0.0,
            id_sigma: 1e-9,
            ..small()
        };
        let means = cfg.cluster_means();
        let roi = RoiAlignConfig::default();
        for i in 0..cfg.images {
            let img = generate_image(&cfg, &means, i).unwrap();
            for d in &img.record.detections {
                let f = extract_detection_features(&img.maps, d, &roi).unwrap();
                let m = &means[d.stride_index - 1][d.class_id][0];
                for (a, b) in f.iter().zip(m) {
                    assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn detections_match_ground_truth_and_logits_agree() {
        let cfg = SynthConfig { unknown_fraction: 0.5, images: 40, ..small() };
        let ds = generate_in_memory(&cfg).unwrap();
        let (mut unknown, mut known) = (0, 0);
        for img in ds.images() {
            assert_eq!(img.detections.len(), img.ground_truth.len());
            for (d, g) in img.detections.iter().zip(&img.ground_truth) {
                assert_eq!(d.bbox, g.bbox);
                let top = (0..cfg.num_classes).max_by(|&a, &b| d.logits[a].total_cmp(&d.logits[b])).unwrap();
                assert_eq!(top, d.class_id);
                if g.is_unknown() {
                    unknown += 1;
                } else {
                    known += 1;
                    assert_eq!(g.class_id, d.class_id as i64);
                }
            }
        }
        assert!(unknown > 10 && known > 10);
    }

    #[test]
    fn label_noise_flips_classes() {
        let cfg = SynthConfig { unknown_fraction: 0.0, label_noise: 1.0, ..small() };
        let ds = generate_in_memory(&cfg).unwrap();
        for img in ds.images() {
            for (d, g) in img.detections.iter().zip(&img.ground_truth) {
                assert_ne!(g.class_id, d.class_id as i64);
            }
        }
    }

    #[test]
    fn feature_means_converge() {
        let cfg = SynthConfig {
            num_classes: 2,
            images: 300,
            unknown_fraction: 0.0,
            id_sigma: 0.5,
            ..small()
        };
        let ds = generate_in_memory(&cfg).unwrap();
        let means = cfg.cluster_means();
        let roi = RoiAlignConfig::default();
        let mut sums: Vec<Vec<(usize, Vec<f64>)>> = cfg
            .channels
            .iter()
            .map(|&ch| vec![(0, vec![0.0; ch]); cfg.num_classes])
            .collect();
        for (i, img) in ds.images().iter().enumerate() {
            for d in &img.detections {
                let f = extract_detection_features(&ds.maps[i], d, &roi).unwrap();
                let cell = &mut sums[d.stride_index - 1][d.class_id];
                cell.0 += 1;
                cell.1.iter_mut().zip(&f).for_each(|(s, v)| *s += v);
            }
        }
        for (s, per_class) in sums.iter().enumerate() {
            for (c, (n, sum)) in per_class.iter().enumerate() {
                assert!(*n > 30);
                let delta: f64 = sum
                    .iter()
                    .zip(&means[s][c][0])
                    .map(|(v, m)| (v / *n as f64 - m).powi(2))
                    .sum::<f64>()
                    .sqrt();
                // per-channel error has sd sigma/sqrt(n); the norm grows with sqrt(dim)
                let bound = 3.0 * cfg.id_sigma * (sum.len() as f64).sqrt() / (*n as f64).sqrt();
                assert!(delta <= bound, "stride {s} class {c}: {delta} > {bound}");
            }
        }
    }

    #[test]
    fn offset_images_share_means_but_not_content() {
        let a = generate_in_memory(&small()).unwrap();
        let b = generate_in_memory(&SynthConfig { first_image: 12, ..small() }).unwrap();
        let ids: Vec<&str> = b.images().iter().map(|i| i.image_id.as_str()).collect();
        assert_eq!(ids[0], "img_000012");
        assert!(a.images().iter().all(|i| !ids.contains(&i.image_id.as_str())));
        let whole = generate_in_memory(&SynthConfig { images: 24, ..small() }).unwrap();
        assert_eq!(whole.images()[12..], b.images()[..]);
    }

    #[test]
    fn zero_shift_unknowns_follow_id_distribution() {
        let cfg = SynthConfig {
            ood_shift: 0.0,
            unknown_fraction: 1.0,
            id_sigma: 1e-9,
            ..small()
        };
        let means = cfg.cluster_means();
        let img = generate_image(&cfg, &means, 0).unwrap();
        let roi = RoiAlignConfig::default();
        for d in &img.record.detections {
            let f = extract_detection_features(&img.maps, d, &roi).unwrap();
            let m = &means[d.stride_index - 1][d.class_id][0];
            assert!(f.iter().zip(m).all(|(a, b)| (a - b).abs() <= 1e-3));
        }
    }

    #[test]
    fn eul_scene_layout() {
        let cfg = SynthConfig { objects_per_image: [1, 2], ..small() };
        for idx in 0..20 {
            let img = plant_eul_scene(&cfg, 1, idx).unwrap();
            let unknown: Vec<_> = img.record.ground_truth.iter().filter(|g| g.is_unknown()).collect();
            assert_eq!(unknown.len(), 1);
            for d in &img.record.detections {
                assert!(d.bbox.iou(&unknown[0].bbox) == 0.0);
                assert_eq!(d.stride_index, 1);
            }
            let m = manifest_for(&cfg, vec![img.record]);
            m.validate_structure().unwrap();
        }
        assert!(plant_eul_scene(&cfg, 5, 0).is_err());
    }
}
