//! Procedural segmentation scenes, augmentation and batching.
//!
//! Every scene is a textured background (class 0) with one to three
//! foreground shapes. Foreground class `c` always has the same shape kind and
//! a class-specific mean color with per-instance jitter, so both shape and
//! color carry label information but neither alone is exact.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::IGNORE_LABEL;
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SearchTrain,
    SearchVal,
    Finetune,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SearchTrain, Split::SearchVal, Split::Finetune, Split::Test];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::SearchTrain => "search-train",
            Split::SearchVal => "search-val",
            Split::Finetune => "finetune",
            Split::Test => "test",
        }
    }
}

/// An image (`3 x H x W`, values roughly in `[0, 1]`) and its label mask
/// (`H x W`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Vec<u8>,
}

/// What the search and training loops need from a dataset.
///
/// External datasets plug in by implementing this trait: paired image/mask
/// samples per split, the class count and the ignored label value.
pub trait SegmentationSource {
    fn num_classes(&self) -> usize;

    fn ignore_label(&self) -> u8 {
        IGNORE_LABEL
    }

    /// Spatial size `[h, w]` shared by all samples.
    fn image_size(&self) -> [usize; 2];

    fn split(&self, split: Split) -> &[Sample];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub size: [usize; 2],
    pub num_classes: usize,
    pub search_train: usize,
    pub search_val: usize,
    pub finetune: usize,
    pub test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: [32, 32],
            num_classes: 3,
            search_train: 160,
            search_val: 40,
            finetune: 200,
            test: 64,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::SearchTrain => self.search_train,
            Split::SearchVal => self.search_val,
            Split::Finetune => self.finetune,
            Split::Test => self.test,
        }
    }

    pub fn violations(&self, total_stride: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(format!("data.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_classes > 6 {
            v.push(format!("data.num_classes must be <= 6, got {}", self.num_classes));
        }
        let [h, w] = self.size;
        if h < 8 || w < 8 {
            v.push(format!("data.size must be at least 8x8, got {h}x{w}"));
        }
        if total_stride == 0 || h % total_stride != 0 || w % total_stride != 0 {
            v.push(format!(
                "data.size {h}x{w} is not divisible by the network stride {total_stride}"
            ));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: DatasetConfig,
    splits: [Vec<Sample>; 4],
}

impl SegmentationSource for ToyDataset {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn image_size(&self) -> [usize; 2] {
        self.config.size
    }

    fn split(&self, split: Split) -> &[Sample] {
        &self.splits[split.slot()]
    }
}

/// Mean RGB of each class; index 0 is the background.
const CLASS_COLORS: [[f64; 3]; 6] = [
    [0.50, 0.50, 0.50],
    [0.85, 0.30, 0.25],
    [0.25, 0.40, 0.85],
    [0.30, 0.80, 0.35],
    [0.85, 0.80, 0.25],
    [0.75, 0.30, 0.80],
];

/// Pixel-frequency bounds of the default 3-class, 32x32 generator, measured
/// over splits of at least 200 scenes: `(background, each foreground class)`.
pub const THREE_CLASS_FREQUENCY_BOUNDS: ((f64, f64), (f64, f64)) = ((0.60, 0.85), (0.07, 0.22));

const COLOR_JITTER: f64 = 0.22;
const PIXEL_NOISE: f64 = 0.05;
// background: shared brightness shift plus a small per-channel tint
const BACKGROUND_LEVEL: f64 = 0.15;
const BACKGROUND_TINT: f64 = 0.05;

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
    Diamond,
}

fn shape_of(class: usize) -> Shape {
    match class {
        1 => Shape::Disc,
        2 => Shape::Square,
        3 => Shape::Triangle,
        4 => Shape::Ring,
        _ => Shape::Diamond,
    }
}

fn inside(shape: Shape, dy: f64, dx: f64, r: f64) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // apex up, base at dy = r
        Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
        }
        Shape::Diamond => dx.abs() + dy.abs() <= r,
    }
}

fn jittered<R: Rng>(base: [f64; 3], rng: &mut R) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
}

/// One scene from its own RNG stream.
pub fn generate_scene<R: Rng>(size: [usize; 2], num_classes: usize, rng: &mut R) -> Sample {
    let [h, w] = size;
    let plane = h * w;
    let mut image = vec![0.0; 3 * plane];
    let mut mask = vec![0u8; plane];
    let level = rng.gen_range(-BACKGROUND_LEVEL..=BACKGROUND_LEVEL);
    let bg = CLASS_COLORS[0].map(|c| c + level + rng.gen_range(-BACKGROUND_TINT..=BACKGROUND_TINT));
    let (fy, fx, phase) = (
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    for y in 0..h {
        for x in 0..w {
            let tex = 0.08 * ((fy * y as f64 + fx * x as f64 + phase).sin());
            for ch in 0..3 {
                image[ch * plane + y * w + x] = bg[ch] + tex;
            }
        }
    }
    let n_shapes = rng.gen_range(1..=3);
    let short = h.min(w) as f64;
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..num_classes);
        let r = rng.gen_range(short / 6.0..=short / 3.0);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let color = jittered(CLASS_COLORS[class], rng);
        let shape = shape_of(class);
        for y in 0..h {
            for x in 0..w {
                if inside(shape, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                    mask[y * w + x] = class as u8;
                    for ch in 0..3 {
                        image[ch * plane + y * w + x] = color[ch];
                    }
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v = (*v + rng.gen_range(-PIXEL_NOISE..=PIXEL_NOISE)).clamp(0.0, 1.0);
    }
    Sample {
        image: Tensor::new(&[3, h, w], image),
        mask,
    }
}

/// Deterministic dataset; sample `i` of split `s` comes from stream
/// `(seed, "toy/<s>/<i>")`, so splits never share a scene.
pub fn make_toy_dataset(config: &DatasetConfig, total_stride: usize) -> Result<ToyDataset> {
    let problems = config.violations(total_stride);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let splits = Split::ALL.map(|s| {
        (0..config.count(s))
            .map(|i| {
                let mut rng = seeds::stream(config.seed, &format!("toy/{}/{i}", s.name()));
                generate_scene(config.size, config.num_classes, &mut rng)
            })
            .collect()
    });
    Ok(ToyDataset {
        config: config.clone(),
        splits,
    })
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    version: u32,
    config: DatasetConfig,
    arrays: String,
}

impl ToyDataset {
    /// Writes `manifest.json` and `arrays.bin` (images and masks as named
    /// tensors) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut store = ParamStore::new();
        for s in Split::ALL {
            for (i, sample) in self.split(s).iter().enumerate() {
                store.push(format!("{}/{i}/image", s.name()), sample.image.clone());
                let [h, w] = self.config.size;
                let mask = sample.mask.iter().map(|&v| v as f64).collect();
                store.push(format!("{}/{i}/mask", s.name()), Tensor::new(&[h, w], mask));
            }
        }
        store.save(&dir.join("arrays.bin"))?;
        let manifest = CacheManifest {
            version: 1,
            config: self.config.clone(),
            arrays: "arrays.bin".into(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CacheManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.version != 1 {
            return Err(Error::Version {
                expected: 1,
                found: manifest.version,
            });
        }
        let store = ParamStore::load(&dir.join(&manifest.arrays))?;
        let config = manifest.config;
        let mut splits: [Vec<Sample>; 4] = Default::default();
        for s in Split::ALL {
            for i in 0..config.count(s) {
                let get = |kind: &str| {
                    store
                        .by_name(&format!("{}/{i}/{kind}", s.name()))
                        .ok_or_else(|| Error::Parse(format!("dataset cache lacks {}/{i}/{kind}", s.name())))
                };
                let image = get("image")?.clone();
                let mask = get("mask")?.data().iter().map(|&v| v as u8).collect();
                splits[s.slot()].push(Sample { image, mask });
            }
        }
        Ok(Self { config, splits })
    }

    /// Loads the cache in `dir` when it matches `config`, otherwise
    /// generates the dataset and writes the cache.
    pub fn load_or_generate(dir: &Path, config: &DatasetConfig, total_stride: usize) -> Result<Self> {
        if let Ok(ds) = Self::load(dir) {
            if &ds.config == config {
                return Ok(ds);
            }
        }
        let ds = make_toy_dataset(config, total_stride)?;
        ds.save(dir)?;
        Ok(ds)
    }
}

/// Random flip, rescale and crop offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    /// Top-left corner of the crop in the rescaled image; negative values pad.
    pub offset: [isize; 2],
}

pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);

fn scaled_size(size: [usize; 2], scale: f64) -> [usize; 2] {
    size.map(|v| ((v as f64 * scale).round() as usize).max(1))
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            scale: 1.0,
            offset: [0, 0],
        }
    }

    pub fn draw<R: Rng>(size: [usize; 2], rng: &mut R) -> Self {
        let flip = rng.gen_bool(0.5);
        let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let scaled = scaled_size(size, scale);
        let offset = [0, 1].map(|d| {
            let slack = scaled[d] as isize - size[d] as isize;
            if slack >= 0 {
                rng.gen_range(0..=slack)
            } else {
                rng.gen_range(slack..=0)
            }
        });
        Self {
            flip,
            scale,
            offset,
        }
    }
}

/// Applies `params` to a sample; the output has the input's size. Images are
/// resampled bilinearly, masks by nearest neighbour; padding is 0 in the
/// image and the ignore label in the mask.
pub fn augment_with(sample: &Sample, params: &AugmentParams) -> Sample {
    let (_, h, w) = (sample.image.shape()[0], sample.image.shape()[1], sample.image.shape()[2]);
    let [sh, sw] = scaled_size([h, w], params.scale);
    let img = sample.image.data();
    let plane = h * w;
    let mut image = vec![0.0; 3 * plane];
    let mut mask = vec![IGNORE_LABEL; plane];
    let ry = h as f64 / sh as f64;
    let rx = w as f64 / sw as f64;
    for oy in 0..h {
        let y = oy as isize + params.offset[0];
        if y < 0 || y >= sh as isize {
            continue;
        }
        for ox in 0..w {
            let x = ox as isize + params.offset[1];
            if x < 0 || x >= sw as isize {
                continue;
            }
            // flip after scaling: column x of the flipped image is sw-1-x
            let xs = if params.flip { sw as isize - 1 - x } else { x } as f64;
            let ys = y as f64;
            let ny = (((ys + 0.5) * ry) as usize).min(h - 1);
            let nx = (((xs + 0.5) * rx) as usize).min(w - 1);
            mask[oy * w + ox] = sample.mask[ny * w + nx];
            let fy = ((ys + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = ((xs + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ay, ax) = (fy - y0 as f64, fx - x0 as f64);
            for ch in 0..3 {
                let at = |yy: usize, xx: usize| img[ch * plane + yy * w + xx];
                let top = at(y0, x0) * (1.0 - ax) + at(y0, x1) * ax;
                let bottom = at(y1, x0) * (1.0 - ax) + at(y1, x1) * ax;
                image[ch * plane + oy * w + ox] = top * (1.0 - ay) + bottom * ay;
            }
        }
    }
    Sample {
        image: Tensor::new(&[3, h, w], image),
        mask,
    }
}

pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let [h, w] = [sample.image.shape()[1], sample.image.shape()[2]];
    augment_with(sample, &AugmentParams::draw([h, w], rng))
}

/// Network input and flattened targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Vec<u8>,
}

/// Maps stored pixel values from `[0, 1]` to roughly `[-1, 1]`.
pub fn normalize_pixel(v: f64) -> f64 {
    (v - 0.5) * 2.0
}

pub fn collate(samples: &[Sample]) -> Result<Batch> {
    let Some(first) = samples.first() else {
        return Err(invalid("empty batch"));
    };
    let shape = first.image.shape().to_vec();
    let mut images = Vec::with_capacity(samples.len() * first.image.numel());
    let mut targets = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Shape("batch samples differ in size".into()));
        }
        images.extend(s.image.data().iter().map(|&v| normalize_pixel(v)));
        targets.extend_from_slice(&s.mask);
    }
    Ok(Batch {
        images: Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], images),
        targets,
    })
}

/// `batch_size` distinct samples drawn uniformly from `pool`.
pub fn sample_batch<R: Rng>(pool: &[Sample], batch_size: usize, augment_data: bool, rng: &mut R) -> Result<Batch> {
    if pool.is_empty() {
        return Err(invalid("cannot draw a batch from an empty split"));
    }
    let n = batch_size.min(pool.len());
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    let chosen: Vec<Sample> = idx[..n]
        .iter()
        .map(|&i| {
            if augment_data {
                augment(&pool[i], rng)
            } else {
                pool[i].clone()
            }
        })
        .collect();
    collate(&chosen)
}

/// Fraction of pixels of each class over a set of samples.
pub fn class_frequencies(samples: &[Sample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for s in samples {
        for &m in &s.mask {
            if (m as usize) < num_classes {
                counts[m as usize] += 1;
                total += 1;
            }
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DatasetConfig {
        DatasetConfig {
            search_train: 4,
            search_val: 2,
            finetune: 3,
            test: 2,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = make_toy_dataset(&small(), 4).unwrap();
        let b = make_toy_dataset(&small(), 4).unwrap();
        assert_eq!(a, b);
        let all: Vec<&Sample> = Split::ALL.iter().flat_map(|&s| a.split(s)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i].image, all[j].image);
            }
        }
    }

    #[test]
    fn labels_stay_in_alphabet() {
        let cfg = DatasetConfig {
            search_train: 200,
            search_val: 0,
            finetune: 0,
            test: 0,
            ..Default::default()
        };
        let d = make_toy_dataset(&cfg, 8).unwrap();
        assert!(d
            .split(Split::SearchTrain)
            .iter()
            .all(|s| s.mask.iter().all(|&m| m < 3)));
    }

    #[test]
    fn rejects_indivisible_size() {
        let cfg = DatasetConfig {
            size: [30, 30],
            ..small()
        };
        assert!(matches!(make_toy_dataset(&cfg, 4), Err(Error::Config(_))));
    }

    #[test]
    fn identity_augmentation() {
        let d = make_toy_dataset(&small(), 4).unwrap();
        let s = &d.split(Split::Test)[0];
        let out = augment_with(s, &AugmentParams::identity());
        assert_eq!(&out.mask, &s.mask);
        assert!(out.image.max_abs_diff(&s.image) < 1e-12);
    }

    #[test]
    fn double_flip_restores_region() {
        let d = make_toy_dataset(&small(), 4).unwrap();
        let s = &d.split(Split::Test)[1];
        let p = AugmentParams {
            flip: true,
            scale: 1.0,
            offset: [0, 0],
        };
        let twice = augment_with(&augment_with(s, &p), &p);
        assert_eq!(twice.mask, s.mask);
        assert!(twice.image.max_abs_diff(&s.image) < 1e-12);
    }

    #[test]
    fn augmented_masks_keep_alphabet() {
        let d = make_toy_dataset(&small(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            for s in d.split(Split::SearchTrain) {
                let a = augment(s, &mut rng);
                assert!(a.mask.iter().all(|&m| m < 3 || m == IGNORE_LABEL));
                assert_eq!(a.mask.len(), s.mask.len());
            }
        }
    }

    #[test]
    fn shrinking_pads_with_ignore() {
        let d = make_toy_dataset(&small(), 4).unwrap();
        let s = &d.split(Split::Test)[0];
        let p = AugmentParams {
            flip: false,
            scale: 0.5,
            offset: [0, 0],
        };
        let a = augment_with(s, &p);
        assert_eq!(a.mask[31 * 32 + 31], IGNORE_LABEL);
        assert_ne!(a.mask[0], IGNORE_LABEL);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_toy_dataset(&small(), 4).unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(ToyDataset::load(dir.path()).unwrap(), d);
        let again = ToyDataset::load_or_generate(dir.path(), &small(), 4).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn collate_shapes() {
        let d = make_toy_dataset(&small(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(d.split(Split::SearchTrain), 3, true, &mut rng).unwrap();
        assert_eq!(b.images.shape(), &[3, 3, 32, 32]);
        assert_eq!(b.targets.len(), 3 * 32 * 32);
    }
}
