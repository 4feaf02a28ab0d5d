//! Image representation, dataset splitting and the train/eval preprocessing
//! pipelines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Interp, SparseMap, Tensor};
use crate::rng;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// A `C × H × W` image with values in `[0, 1]` (before normalization).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        Ok(Self(Tensor::from_vec(&[channels, height, width], data)?))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self(Tensor::full(&[channels, height, width], value))
    }

    pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Shape(format!("expected C×H×W, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.0.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.0.shape() == other.0.shape()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (h, w) = (self.height(), self.width());
        self.0.data_mut()[(c * h + y) * w + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.0.data()[c * n..(c + 1) * n]
    }

    pub fn require_rgb(&self) -> Result<()> {
        if self.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected a 3-channel image, got {} channels",
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        Self::new(3, h, w, data)
    }

    /// Writes an 8-bit RGB PNG (values are clipped to `[0, 1]`).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.require_rgb()?;
        let (h, w) = (self.height(), self.width());
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| (self.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resize(&self, height: usize, width: usize, interp: Interp) -> Self {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let map = SparseMap::<f32>::resize2d(self.height(), self.width(), height, width, interp);
        let c = self.channels();
        let mut out = vec![0.0; c * height * width];
        for (ci, dst) in out.chunks_mut(height * width).enumerate() {
            map.apply(self.plane(ci), dst);
        }
        Self::new(c, height, width, out).unwrap()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height() || left + width > self.width() {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height(),
                self.width()
            )));
        }
        let c = self.channels();
        let mut out = Vec::with_capacity(c * height * width);
        for ci in 0..c {
            for y in top..top + height {
                let row = (ci * self.height() + y) * self.width();
                out.extend_from_slice(&self.data()[row + left..row + left + width]);
            }
        }
        Self::new(c, height, width, out)
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        let w = self.width();
        for row in out.data_mut().chunks_mut(w) {
            row.reverse();
        }
        out
    }

    pub fn clip_unit(&mut self) {
        for v in self.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn normalize(&self, mean: &[f32; 3], std: &[f32; 3]) -> Result<Self> {
        self.require_rgb()?;
        let mut out = self.clone();
        let n = self.height() * self.width();
        for (c, plane) in out.data_mut().chunks_mut(n).enumerate() {
            for v in plane {
                *v = (*v - mean[c]) / std[c];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, mean: &[f32; 3], std: &[f32; 3]) -> Result<Self> {
        self.require_rgb()?;
        let mut out = self.clone();
        let n = self.height() * self.width();
        for (c, plane) in out.data_mut().chunks_mut(n).enumerate() {
            for v in plane {
                *v = *v * std[c] + mean[c];
            }
        }
        Ok(out)
    }
}

/// Stacks images into a `[B, C, H, W]` batch tensor.
pub fn batch(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = images.iter().map(|i| i.tensor()).collect();
    Tensor::stack(&refs)
}

/// Splits a `[B, C, H, W]` tensor back into images.
pub fn unbatch(t: &Tensor<f32>) -> Vec<ImageTensor> {
    let (b, c, h, w) = t.dims4();
    (0..b).map(|i| ImageTensor::new(c, h, w, t.item(i).to_vec()).unwrap()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub train_per_class: usize,
    pub val_fraction: f64,
}

impl Default for SplitRule {
    fn default() -> Self {
        Self {
            train_per_class: 60,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self, kind: SplitKind) -> &[Sample] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn load_image(&self, sample: &Sample) -> Result<ImageTensor> {
        ImageTensor::load(&self.root.join(&sample.path))
    }

    /// Decodes every image of one split, in manifest order.
    pub fn load_all(&self, kind: SplitKind) -> Result<Vec<(ImageTensor, usize)>> {
        self.samples(kind).iter().map(|s| Ok((self.load_image(s)?, s.class_id))).collect()
    }

    /// One `<relative_path>\t<class_id>\t<split>` line per image.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            for s in self.samples(kind) {
                out.push_str(&format!(
                    "{}\t{}\t{}\n",
                    s.path.to_string_lossy().replace('\\', "/"),
                    s.class_id,
                    kind.as_str()
                ));
            }
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.manifest().as_bytes())
    }

    /// Rebuilds a split from a manifest. Class names are taken from the first
    /// path component of each entry.
    pub fn read_manifest(root: &Path, manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut split = DatasetSplit {
            root: root.to_path_buf(),
            class_names: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        let mut names: BTreeMap<usize, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Dataset(format!("{}:{}: malformed manifest line", manifest.display(), lineno + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let path = PathBuf::from(fields[0]);
            let class_id: usize = fields[1].parse().map_err(|_| bad())?;
            if let Some(first) = path.components().next() {
                names
                    .entry(class_id)
                    .or_insert_with(|| first.as_os_str().to_string_lossy().into_owned());
            }
            let sample = Sample { path, class_id };
            match fields[2] {
                "train" => split.train.push(sample),
                "val" => split.val.push(sample),
                "test" => split.test.push(sample),
                _ => return Err(bad()),
            }
        }
        let n = names.keys().next_back().map_or(0, |m| m + 1);
        if names.len() != n {
            return Err(Error::Dataset("manifest class ids are not contiguous".into()));
        }
        split.class_names = names.into_values().collect();
        Ok(split)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Deterministic per-class split: a seeded shuffle picks up to
/// `train_per_class` images, the first `val_fraction` of which become the
/// validation set; the remaining images are the test set.
pub fn load_split(root: &Path, seed: u64) -> Result<DatasetSplit> {
    load_split_with(root, seed, SplitRule::default())
}

pub fn load_split_with(root: &Path, seed: u64, rule: SplitRule) -> Result<DatasetSplit> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            class_dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} contains no class directories", root.display())));
    }
    class_dirs.sort();

    let mut split = DatasetSplit {
        root: root.to_path_buf(),
        class_names: Vec::new(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class_id, (name, dir)) in class_dirs.into_iter().enumerate() {
        let mut files: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image(p))
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        if files.is_empty() {
            return Err(Error::Class {
                class: name,
                reason: "directory contains no images".into(),
            });
        }
        files.sort();
        let mut rng = rng::stream(seed, &[rng::label_key(&name)]);
        files.shuffle(&mut rng);
        let n_train = rule.train_per_class.min(files.len());
        let n_val = ((n_train as f64) * rule.val_fraction).round() as usize;
        for (i, file) in files.into_iter().enumerate() {
            let sample = Sample {
                path: PathBuf::from(&name).join(file),
                class_id,
            };
            if i < n_val {
                split.val.push(sample);
            } else if i < n_train {
                split.train.push(sample);
            } else {
                split.test.push(sample);
            }
        }
        split.class_names.push(name);
    }
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub mode: PreprocessMode,
    pub crop_size: usize,
    pub area_range: [f64; 2],
    pub aspect_range: [f64; 2],
    pub hflip_prob: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PreprocessConfig {
    pub fn train(crop_size: usize) -> Self {
        Self {
            mode: PreprocessMode::Train,
            crop_size,
            area_range: [0.08, 1.0],
            aspect_range: [3.0 / 4.0, 4.0 / 3.0],
            hflip_prob: 0.5,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn eval(crop_size: usize) -> Self {
        Self {
            mode: PreprocessMode::Eval,
            ..Self::train(crop_size)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

pub const CROP_ATTEMPTS: usize = 10;

/// Log-uniform aspect ratio (width / height) in `range`.
pub fn sample_aspect(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    let (lo, hi) = (range[0].ln(), range[1].ln());
    if hi <= lo {
        return range[0];
    }
    rng.random_range(lo..hi).exp()
}

/// Random-resized-crop box with bounded retries and a center-crop fallback.
pub fn sample_crop(height: usize, width: usize, cfg: &PreprocessConfig, rng: &mut impl Rng) -> CropBox {
    let area = (height * width) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let target = area
            * if cfg.area_range[1] > cfg.area_range[0] {
                rng.random_range(cfg.area_range[0]..=cfg.area_range[1])
            } else {
                cfg.area_range[0]
            };
        let aspect = sample_aspect(cfg.aspect_range, rng);
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropBox {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    center_crop_box(height, width, cfg.aspect_range)
}

fn center_crop_box(height: usize, width: usize, aspect_range: [f64; 2]) -> CropBox {
    let ratio = width as f64 / height as f64;
    let (h, w) = if ratio < aspect_range[0] {
        (((width as f64) / aspect_range[0]).round() as usize, width)
    } else if ratio > aspect_range[1] {
        (height, ((height as f64) * aspect_range[1]).round() as usize)
    } else {
        (height, width)
    };
    let (h, w) = (h.clamp(1, height), w.clamp(1, width));
    CropBox {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

/// Geometric part of the training pipeline: random resized crop and
/// horizontal flip. Output stays in `[0, 1]` so degradations can be applied
/// before normalization.
pub fn augment_train(img: &ImageTensor, cfg: &PreprocessConfig, rng: &mut impl Rng) -> Result<ImageTensor> {
    if cfg.mode != PreprocessMode::Train {
        return Err(Error::invalid("augment_train needs a train-mode config"));
    }
    img.require_rgb()?;
    let b = sample_crop(img.height(), img.width(), cfg, rng);
    let mut out = img
        .crop(b.top, b.left, b.height, b.width)?
        .resize(cfg.crop_size, cfg.crop_size, Interp::Bilinear);
    if rng.random_bool(cfg.hflip_prob.clamp(0.0, 1.0)) {
        out = out.hflip();
    }
    Ok(out)
}

pub fn preprocess_train(img: &ImageTensor, cfg: &PreprocessConfig, rng: &mut impl Rng) -> Result<ImageTensor> {
    augment_train(img, cfg, rng)?.normalize(&cfg.mean, &cfg.std)
}

/// Shorter edge resized to `crop_size` (aspect preserved), then a centered
/// `crop_size × crop_size` crop. Output stays in `[0, 1]`.
pub fn eval_geometry(img: &ImageTensor, crop_size: usize) -> Result<ImageTensor> {
    img.require_rgb()?;
    let (h, w) = (img.height(), img.width());
    let (nh, nw) = if h <= w {
        (
            crop_size,
            ((w as f64) * crop_size as f64 / h as f64).round().max(crop_size as f64) as usize,
        )
    } else {
        (
            ((h as f64) * crop_size as f64 / w as f64).round().max(crop_size as f64) as usize,
            crop_size,
        )
    };
    let resized = img.resize(nh, nw, Interp::Bilinear);
    resized.crop((nh - crop_size) / 2, (nw - crop_size) / 2, crop_size, crop_size)
}

pub fn preprocess_eval(img: &ImageTensor, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    if cfg.mode != PreprocessMode::Eval {
        return Err(Error::invalid("preprocess_eval needs an eval-mode config"));
    }
    eval_geometry(img, cfg.crop_size)?.normalize(&cfg.mean, &cfg.std)
}

/// Shared resize operator cache key helper for callers that resize many
/// same-shaped images.
pub fn resize_map(in_h: usize, in_w: usize, out_h: usize, out_w: usize, interp: Interp) -> Arc<SparseMap<f32>> {
    Arc::new(SparseMap::resize2d(in_h, in_w, out_h, out_w, interp))
}
