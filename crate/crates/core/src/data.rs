//! Dataset manifests, loaders, the synthetic generator, and batch iteration.
//!
//! Images are kept as 8-bit channels in `(C, H, W)` order and converted to
//! `[0, 1]` floats when a batch is assembled. Normalization with the
//! manifest's mean and standard deviation happens after augmentation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::INPUT_CHANNELS;
use crate::util::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    CifarBinary,
    ImageFolder,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: [0.0; 3], std: [1.0; 3] };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarLabel {
    /// One label byte per record.
    Single,
    /// Coarse then fine label byte; the fine label is used.
    Fine,
    /// Coarse then fine label byte; the coarse label is used.
    Coarse,
}

/// Record layout and files of a CIFAR-style binary archive, relative to the
/// dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarLayout {
    pub label: CifarLabel,
    pub train_files: Vec<String>,
    pub val_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "defaults::classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::per_class")]
    pub samples_per_class: usize,
    #[serde(default = "defaults::val_per_class")]
    pub val_per_class: usize,
    #[serde(default = "defaults::resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::separation")]
    pub class_separation: f64,
}

mod defaults {
    pub fn classes() -> usize {
        10
    }
    pub fn per_class() -> usize {
        200
    }
    pub fn val_per_class() -> usize {
        50
    }
    pub fn resolution() -> usize {
        32
    }
    pub fn separation() -> f64 {
        3.0
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: defaults::classes(),
            samples_per_class: defaults::per_class(),
            val_per_class: defaults::val_per_class(),
            resolution: defaults::resolution(),
            seed: 0,
            class_separation: defaults::separation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub resolution: usize,
    pub normalization: Normalization,
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar: Option<CifarLayout>,
    /// Shorter-side resize before the center crop to `resolution`
    /// (image folders only); defaults to `resolution * 8 / 7`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

const CIFAR10_NORM: Normalization = Normalization { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] };
const CIFAR100_NORM: Normalization = Normalization { mean: [0.5071, 0.4865, 0.4409], std: [0.2673, 0.2564, 0.2762] };
const IMAGENET_NORM: Normalization = Normalization { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };

/// Names accepted by [`DatasetManifest::preset`].
pub const PRESETS: [&str; 7] = ["cifar10", "cifar100", "tiny_imagenet", "cub200", "stanford_dogs", "mit67", "aircraft"];

impl DatasetManifest {
    /// Built-in manifests with the standard split sizes.
    pub fn preset(name: &str) -> Result<Self> {
        let folder = |n: &str, classes, train, val, res, norm: Normalization| DatasetManifest {
            name: n.to_string(),
            num_classes: classes,
            train_count: train,
            val_count: val,
            resolution: res,
            normalization: norm,
            source: DataSource::ImageFolder,
            cifar: None,
            load_resolution: None,
            synthetic: None,
        };
        let m = match name {
            "cifar10" => DatasetManifest {
                source: DataSource::CifarBinary,
                cifar: Some(CifarLayout {
                    label: CifarLabel::Single,
                    train_files: (1..=5).map(|i| format!("cifar-10-batches-bin/data_batch_{i}.bin")).collect(),
                    val_files: vec!["cifar-10-batches-bin/test_batch.bin".into()],
                }),
                ..folder("cifar10", 10, 50_000, 10_000, 32, CIFAR10_NORM)
            },
            "cifar100" => DatasetManifest {
                source: DataSource::CifarBinary,
                cifar: Some(CifarLayout {
                    label: CifarLabel::Fine,
                    train_files: vec!["cifar-100-binary/train.bin".into()],
                    val_files: vec!["cifar-100-binary/test.bin".into()],
                }),
                ..folder("cifar100", 100, 50_000, 10_000, 32, CIFAR100_NORM)
            },
            "tiny_imagenet" => DatasetManifest { load_resolution: Some(64), ..folder("tiny_imagenet", 200, 100_000, 10_000, 64, IMAGENET_NORM) },
            "cub200" => folder("cub200", 200, 5_994, 5_794, 224, IMAGENET_NORM),
            "stanford_dogs" => folder("stanford_dogs", 120, 12_000, 8_580, 224, IMAGENET_NORM),
            "mit67" => folder("mit67", 67, 5_360, 1_340, 224, IMAGENET_NORM),
            "aircraft" => folder("aircraft", 100, 6_667, 3_334, 224, IMAGENET_NORM),
            other => return Err(Error::config("data.preset", format!("unknown preset `{other}`; expected one of {PRESETS:?}"))),
        };
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("data.manifest.num_classes", "must be at least 2"));
        }
        if self.train_count == 0 || self.val_count == 0 {
            return Err(Error::config("data.manifest.train_count", "split counts must be positive"));
        }
        if self.resolution == 0 {
            return Err(Error::config("data.manifest.resolution", "must be positive"));
        }
        if self.normalization.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("data.manifest.normalization.std", "must be positive"));
        }
        if self.source == DataSource::CifarBinary && self.cifar.is_none() {
            return Err(Error::config("data.manifest.cifar", "required for cifar_binary sources"));
        }
        Ok(())
    }
}

/// One split: 8-bit images in `(C, H, W)` order and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    resolution: usize,
}

impl Split {
    pub fn new(pixels: Vec<u8>, labels: Vec<usize>, resolution: usize) -> Result<Self> {
        let per = INPUT_CHANNELS * resolution * resolution;
        if pixels.len() != per * labels.len() {
            return Err(Error::Dataset(format!("{} pixel bytes for {} images of {per}", pixels.len(), labels.len())));
        }
        Ok(Split { pixels, labels, resolution })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn image_bytes(&self, index: usize) -> &[u8] {
        let per = INPUT_CHANNELS * self.resolution * self.resolution;
        &self.pixels[index * per..(index + 1) * per]
    }

    /// Images at `indices` as `[0, 1]` floats.
    pub fn batch(&self, indices: &[usize]) -> Array4<f64> {
        let r = self.resolution;
        let mut out = Array4::<f64>::zeros((indices.len(), INPUT_CHANNELS, r, r));
        for (row, &i) in indices.iter().enumerate() {
            let src = self.image_bytes(i);
            for (dst, &b) in out.index_axis_mut(Axis(0), row).iter_mut().zip(src) {
                *dst = b as f64 / 255.0;
            }
        }
        out
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// All images as `[0, 1]` floats.
    pub fn all_images(&self) -> Array4<f64> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Split> {
        Split::new(self.pixels.clone(), labels, self.resolution)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Split,
    pub val: Split,
}

impl Dataset {
    fn checked(manifest: DatasetManifest, train: Split, val: Split) -> Result<Self> {
        if train.len() != manifest.train_count || val.len() != manifest.val_count {
            return Err(Error::Dataset(format!(
                "{}: manifest lists {} train / {} val samples, found {} / {}",
                manifest.name,
                manifest.train_count,
                manifest.val_count,
                train.len(),
                val.len()
            )));
        }
        for split in [&train, &val] {
            if let Some(&l) = split.labels.iter().find(|&&l| l >= manifest.num_classes) {
                return Err(Error::Dataset(format!("label {l} outside [0, {})", manifest.num_classes)));
            }
            if split.resolution != manifest.resolution {
                return Err(Error::Dataset(format!("images are {}px, manifest says {}px", split.resolution, manifest.resolution)));
            }
        }
        Ok(Dataset { manifest, train, val })
    }
}

/// Subtracts the manifest mean and divides by its standard deviation per
/// channel.
pub fn normalize(images: &mut Array4<f64>, norm: &Normalization) {
    for (c, mut plane) in images.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (norm.mean[c], norm.std[c]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
}

/// Reads a dataset from `root` according to its manifest.
pub fn load_dataset(manifest: &DatasetManifest, root: &Path) -> Result<Dataset> {
    manifest.validate()?;
    match manifest.source {
        DataSource::CifarBinary => load_cifar(manifest, root),
        DataSource::ImageFolder => load_image_folder(manifest, root),
        DataSource::Synthetic => {
            let spec = manifest.synthetic.clone().unwrap_or_default();
            let ds = generate_synthetic(&spec)?;
            Dataset::checked(manifest.clone(), ds.train, ds.val)
        }
    }
}

fn load_cifar(manifest: &DatasetManifest, root: &Path) -> Result<Dataset> {
    let layout = manifest.cifar.as_ref().expect("validated");
    if manifest.resolution != 32 {
        return Err(Error::Dataset("CIFAR binary records are 32x32".into()));
    }
    let label_bytes = match layout.label {
        CifarLabel::Single => 1,
        CifarLabel::Fine | CifarLabel::Coarse => 2,
    };
    let record = label_bytes + 3072;
    let read = |files: &[String]| -> Result<Split> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            let path = root.join(f);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % record != 0 {
                return Err(Error::Corrupt { path, message: format!("size {} is not a multiple of {record}", bytes.len()) });
            }
            for rec in bytes.chunks_exact(record) {
                let label = match layout.label {
                    CifarLabel::Single | CifarLabel::Coarse => rec[0],
                    CifarLabel::Fine => rec[1],
                };
                labels.push(label as usize);
                pixels.extend_from_slice(&rec[label_bytes..]);
            }
        }
        Split::new(pixels, labels, 32)
    };
    Dataset::checked(manifest.clone(), read(&layout.train_files)?, read(&layout.val_files)?)
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_image(path: &Path, load: usize, crop: usize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Corrupt { path: path.to_path_buf(), message: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let scale = load as f64 / w.min(h) as f64;
    let (nw, nh) = (((w as f64 * scale).round() as u32).max(load as u32), ((h as f64 * scale).round() as u32).max(load as u32));
    let resized = image::imageops::resize(&rgb, nw, nh, image::imageops::FilterType::Triangle);
    let (x0, y0) = ((nw - crop as u32) / 2, (nh - crop as u32) / 2);
    let mut chw = vec![0u8; 3 * crop * crop];
    for y in 0..crop {
        for x in 0..crop {
            let p = resized.get_pixel(x0 + x as u32, y0 + y as u32);
            for c in 0..3 {
                chw[c * crop * crop + y * crop + x] = p[c];
            }
        }
    }
    Ok(chw)
}

/// `root/<split>/<class>/<file>`, classes numbered in sorted directory order.
fn load_image_folder(manifest: &DatasetManifest, root: &Path) -> Result<Dataset> {
    let crop = manifest.resolution;
    let load = manifest.load_resolution.unwrap_or(crop * 8 / 7).max(crop);
    let classes = sorted_entries(&root.join("train"), true)?;
    let class_names: Vec<String> = classes.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    if class_names.len() != manifest.num_classes {
        return Err(Error::Dataset(format!(
            "found {} class directories, manifest lists {} classes",
            class_names.len(),
            manifest.num_classes
        )));
    }
    let read = |split: &str| -> Result<Split> {
        let dir = root.join(split);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for class_dir in sorted_entries(&dir, true)? {
            let name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
            let label = class_names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Dataset(format!("class `{name}` in {split} is absent from train")))?;
            for file in sorted_entries(&class_dir, false)? {
                pixels.extend(load_image(&file, load, crop)?);
                labels.push(label);
            }
        }
        Split::new(pixels, labels, crop)
    };
    Dataset::checked(manifest.clone(), read("train")?, read("val")?)
}

/// Smooth, horizontally symmetric pattern per class and channel with unit
/// mean square.
fn class_pattern(seed: u64, class: usize, r: usize) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Synthetic, &[0, class as u64]);
    let mut out = vec![0.0; 3 * r * r];
    let centre = (r as f64 - 1.0) / 2.0;
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.5..2.5), rng.gen_range(0.0..2.5), rng.gen_range(0.0..2.0 * PI), rng.gen_range(-1.0..1.0)))
            .collect();
        let plane = &mut out[c * r * r..(c + 1) * r * r];
        for y in 0..r {
            for x in 0..r {
                let (fy, fx) = (y as f64 / r as f64, (x as f64 - centre) / r as f64);
                plane[y * r + x] = waves.iter().map(|&(ky, kx, ph, a)| a * (2.0 * PI * ky * fy + ph).cos() * (2.0 * PI * kx * fx).cos()).sum();
            }
        }
    }
    let ms = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
    let scale = 1.0 / ms.sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Pixel amplitude of one unit of class separation.
const SYNTHETIC_AMPLITUDE: f64 = 0.05;
const SYNTHETIC_NOISE: f64 = 0.15;

/// Class-conditional images: a shared background plus a class pattern scaled
/// by `class_separation`, plus per-pixel Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.samples_per_class == 0 || spec.val_per_class == 0 || spec.resolution < 1 {
        return Err(Error::config("data.synthetic", "needs at least 2 classes and positive counts"));
    }
    if !(spec.class_separation >= 0.0 && spec.class_separation.is_finite()) {
        return Err(Error::config("data.synthetic.class_separation", "must be non-negative"));
    }
    let r = spec.resolution;
    let background = class_pattern(spec.seed, usize::MAX, r);
    let patterns: Vec<Vec<f64>> = (0..spec.num_classes).map(|k| class_pattern(spec.seed, k, r)).collect();
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("positive std");
    let make = |split: u64, per_class: usize| -> Result<Split> {
        let mut rng = stream(spec.seed, Stream::Synthetic, &[1, split]);
        let mut order: Vec<usize> = (0..spec.num_classes * per_class).map(|i| i % spec.num_classes).collect();
        order.shuffle(&mut rng);
        let mut pixels = Vec::with_capacity(order.len() * 3 * r * r);
        for &k in &order {
            for (b, p) in background.iter().zip(&patterns[k]) {
                let v = 0.5 + 0.1 * b + SYNTHETIC_AMPLITUDE * spec.class_separation * p + noise.sample(&mut rng);
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Split::new(pixels, order, r)
    };
    let train = make(0, spec.samples_per_class)?;
    let val = make(1, spec.val_per_class)?;
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        num_classes: spec.num_classes,
        train_count: train.len(),
        val_count: val.len(),
        resolution: r,
        normalization: Normalization { mean: [0.5; 3], std: [0.25; 3] },
        source: DataSource::Synthetic,
        cifar: None,
        load_resolution: None,
        synthetic: Some(spec.clone()),
    };
    Dataset::checked(manifest, train, val)
}

/// Replaces `round(fraction * n)` labels, chosen at random, with a different
/// random class.
pub fn inject_label_noise(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("data.label_noise", "must lie in [0, 1]"));
    }
    let mut rng = stream(seed, Stream::LabelNoise, &[]);
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(&mut rng);
    let flips = (fraction * labels.len() as f64).round() as usize;
    let mut out = labels.to_vec();
    for &i in &idx[..flips] {
        let shift = rng.gen_range(1..num_classes);
        out[i] = (labels[i] + shift) % num_classes;
    }
    Ok(out)
}

/// Shuffled batches of `0..n` for one epoch; the last batch may be short.
pub fn epoch_iterator(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::DataOrder, &[epoch as u64]));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
