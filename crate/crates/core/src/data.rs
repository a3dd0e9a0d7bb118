//! Image/mask datasets on disk, tiling, augmentation, class weights and the
//! procedural texture dataset used for desk-scale experiments.
//!
//! Layout: `root/{train,test}/{images,masks}/NAME.png` plus `root/dataset.toml`.
//! Masks are 8-bit single-channel images holding class indices.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervision::one_hot;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "dataset.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Relative paths of one image and its mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: usize,
    pub channels: usize,
    pub tile_size: usize,
    pub stride: usize,
    /// Per-channel mean and standard deviation of training pixels scaled to `[0, 1]`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

fn read_dir_pngs(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf(), hint: "listed in the dataset manifest".into() });
    }
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Channel values of an image scaled to `[0, 1]`, planar `[C, H, W]`.
fn planar(img: &image::DynamicImage, channels: usize) -> (Vec<f64>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; channels * h * w];
    match channels {
        1 => {
            for (i, p) in img.to_luma8().pixels().enumerate() {
                out[i] = p.0[0] as f64 / 255.0;
            }
        }
        _ => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    out[c * h * w + i] = p.0[c] as f64 / 255.0;
                }
            }
        }
    }
    (out, h, w)
}

impl DatasetManifest {
    /// Pairs every `images/NAME.png` with `masks/NAME.png` under both splits and
    /// computes normalization statistics on the training images.
    pub fn scan(root: &Path, classes: usize, channels: usize, tile_size: usize, stride: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("images must have 1 or 3 channels, got {channels}")));
        }
        let mut splits = Vec::new();
        for split in [Split::Train, Split::Test] {
            let base = root.join(split.dir());
            let images = read_dir_pngs(&base.join("images"))?;
            let masks = read_dir_pngs(&base.join("masks"))?;
            for m in &masks {
                if images.binary_search(m).is_err() {
                    return Err(Error::Dataset { path: base.join("masks").join(m), message: "mask has no image".into() });
                }
            }
            let mut pairs = Vec::new();
            for name in images {
                if masks.binary_search(&name).is_err() {
                    return Err(Error::Dataset { path: base.join("images").join(&name), message: "image has no mask".into() });
                }
                pairs.push(Pair {
                    image: format!("{}/images/{name}", split.dir()),
                    mask: format!("{}/masks/{name}", split.dir()),
                });
            }
            splits.push(pairs);
        }
        let test = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        let mut manifest = Self {
            classes,
            channels,
            tile_size,
            stride,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            train,
            test,
            synthetic: None,
        };
        manifest.compute_stats(root)?;
        Ok(manifest)
    }

    /// Recomputes per-channel statistics over the training images.
    pub fn compute_stats(&mut self, root: &Path) -> Result<()> {
        let c = self.channels;
        let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
        for pair in &self.train {
            let (px, h, w) = planar(&open_image(&root.join(&pair.image))?, c);
            for ci in 0..c {
                for &v in &px[ci * h * w..(ci + 1) * h * w] {
                    sum[ci] += v;
                    sq[ci] += v * v;
                }
            }
            n += h * w;
        }
        if n > 0 {
            for ci in 0..c {
                let mean = sum[ci] / n as f64;
                self.mean[ci] = mean;
                self.std[ci] = (sq[ci] / n as f64 - mean * mean).max(0.0).sqrt().max(1e-6);
            }
        }
        Ok(())
    }

    pub fn pairs(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                path: path.clone(),
                hint: "generate a dataset with `gen-data` or scan a directory first".into(),
            },
            _ => Error::io(&path, e),
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse { path, message: e.to_string() })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = toml::to_string_pretty(self).map_err(|e| Error::Parse { path: path.clone(), message: e.to_string() })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// One normalized tile and its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[channels, tile, tile]`.
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub channels: usize,
    pub tile_size: usize,
}

/// Top-left corners of `tile`-sized windows placed every `stride` pixels.
fn tile_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    if extent < tile {
        return Vec::new();
    }
    (0..=extent - tile).step_by(stride.max(1)).collect()
}

/// Reads, validates, tiles and normalizes one split in manifest order.
pub fn load_dataset(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Dataset> {
    let (c, t) = (manifest.channels, manifest.tile_size);
    let mut samples = Vec::new();
    for pair in manifest.pairs(split) {
        let ipath = root.join(&pair.image);
        let mpath = root.join(&pair.mask);
        let (px, h, w) = planar(&open_image(&ipath)?, c);
        let mask = open_image(&mpath)?.to_luma8();
        if (mask.height() as usize, mask.width() as usize) != (h, w) {
            return Err(Error::Dataset {
                path: mpath,
                message: format!("mask is {}x{}, image is {h}x{w}", mask.height(), mask.width()),
            });
        }
        if let Some(bad) = mask.pixels().find(|p| p.0[0] as usize >= manifest.classes) {
            return Err(Error::Dataset {
                path: mpath,
                message: format!("label {} outside 0..{}", bad.0[0], manifest.classes),
            });
        }
        let (ys, xs) = (tile_origins(h, t, manifest.stride), tile_origins(w, t, manifest.stride));
        if ys.is_empty() || xs.is_empty() {
            return Err(Error::Dataset { path: ipath, message: format!("{h}x{w} image is smaller than tile {t}") });
        }
        let stem = Path::new(&pair.image).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for &y0 in &ys {
            for &x0 in &xs {
                let mut data = Vec::with_capacity(c * t * t);
                for ci in 0..c {
                    let (m, s) = (manifest.mean[ci], manifest.std[ci]);
                    for y in y0..y0 + t {
                        for x in x0..x0 + t {
                            data.push(((px[ci * h * w + y * w + x] - m) / s) as f32);
                        }
                    }
                }
                let labels = (y0..y0 + t)
                    .flat_map(|y| (x0..x0 + t).map(move |x| (x, y)))
                    .map(|(x, y)| mask.get_pixel(x as u32, y as u32).0[0])
                    .collect();
                samples.push(Sample {
                    name: format!("{stem}_{y0}_{x0}"),
                    image: Tensor::from_vec(&[c, t, t], data)?,
                    labels,
                });
            }
        }
    }
    Ok(Dataset { samples, classes: manifest.classes, channels: c, tile_size: t })
}

/// Spatial augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flips: bool,
    /// Maximum shift as a fraction of the tile size; vacated pixels are reflected.
    pub shift_margin: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flips: true, shift_margin: 0.1 }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Resamples every plane with `src(y, x) = (map_y(y), map_x(x))`.
fn remap<T: Copy>(data: &[T], planes: usize, h: usize, w: usize, ys: &[usize], xs: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for &sy in ys {
            for &sx in xs {
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

pub fn hflip(image: &Tensor<f32>, labels: &[u8]) -> (Tensor<f32>, Vec<u8>) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let ys: Vec<usize> = (0..h).collect();
    let xs: Vec<usize> = (0..w).rev().collect();
    transform(image, labels, c, h, w, &ys, &xs)
}

pub fn vflip(image: &Tensor<f32>, labels: &[u8]) -> (Tensor<f32>, Vec<u8>) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let ys: Vec<usize> = (0..h).rev().collect();
    let xs: Vec<usize> = (0..w).collect();
    transform(image, labels, c, h, w, &ys, &xs)
}

fn transform(
    image: &Tensor<f32>,
    labels: &[u8],
    c: usize,
    h: usize,
    w: usize,
    ys: &[usize],
    xs: &[usize],
) -> (Tensor<f32>, Vec<u8>) {
    let img = Tensor::from_vec(&[c, h, w], remap(image.data(), c, h, w, ys, xs)).expect("same size");
    (img, remap(labels, 1, h, w, ys, xs))
}

/// Random flips (probability 0.5 each) and a shift-and-crop, applied identically
/// to the `[C, H, W]` image and its label map.
pub fn augment(image: &Tensor<f32>, labels: &[u8], seed: u64, cfg: &AugmentConfig) -> (Tensor<f32>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (fh, fv) = if cfg.flips { (rng.gen_bool(0.5), rng.gen_bool(0.5)) } else { (false, false) };
    let (my, mx) = ((cfg.shift_margin * h as f64).round() as isize, (cfg.shift_margin * w as f64).round() as isize);
    let dy = if my > 0 { rng.gen_range(-my..=my) } else { 0 };
    let dx = if mx > 0 { rng.gen_range(-mx..=mx) } else { 0 };
    let ys: Vec<usize> = (0..h as isize)
        .map(|y| reflect(if fv { h as isize - 1 - y } else { y } + dy, h))
        .collect();
    let xs: Vec<usize> = (0..w as isize)
        .map(|x| reflect(if fh { w as isize - 1 - x } else { x } + dx, w))
        .collect();
    transform(image, labels, c, h, w, &ys, &xs)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the given samples into `[N, channels, T, T]` images and one-hot
    /// `[N, C, T, T]` masks, optionally augmenting sample `k` with `seeds[k]`.
    pub fn batch(&self, indices: &[usize], augmentation: Option<(&AugmentConfig, &[u64])>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let t = self.tile_size;
        let mut images = Vec::with_capacity(indices.len());
        let mut masks = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            let (img, lab) = match augmentation {
                Some((cfg, seeds)) => augment(&s.image, &s.labels, seeds[k], cfg),
                None => (s.image.clone(), s.labels.clone()),
            };
            masks.push(one_hot::<f32>(&lab, t, t, self.classes)?);
            images.push(img);
        }
        Ok((
            Tensor::stack(&images.iter().collect::<Vec<_>>())?,
            Tensor::stack(&masks.iter().collect::<Vec<_>>())?,
        ))
    }

    pub fn label_maps(&self) -> Vec<&[u8]> {
        self.samples.iter().map(|s| s.labels.as_slice()).collect()
    }
}

/// `W_c = 1 − N_c / N` over every pixel of `masks`.
pub fn class_weights(masks: &[&[u8]], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    let mut total = 0usize;
    for m in masks {
        for &l in m.iter() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::InvalidMask(format!("label {l} outside 0..{classes}")));
            }
            counts[l] += 1;
        }
        total += m.len();
    }
    if total == 0 {
        return Err(Error::InvalidArgument("class weights need at least one labelled pixel".into()));
    }
    Ok(counts.iter().map(|&n| 1.0 - n as f64 / total as f64).collect())
}

/// Oriented sinusoid used to fill one class's regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// Cycles per pixel.
    pub frequency: f64,
    /// Radians.
    pub orientation: f64,
    /// Additive offset per RGB channel, scaled by the spec's tint.
    pub color: [f64; 3],
}

/// Parameters of the procedural Voronoi texture dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub tile_size: usize,
    /// Deepest learner the data must support; the tile size must be divisible by `2^max_depth`.
    pub max_depth: usize,
    /// Voronoi sites per class in every tile.
    pub cells_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise (intensity range `[0, 1]`).
    pub noise: f64,
    /// Amplitude of the per-class color offset; 0 makes classes separable by texture alone.
    pub tint: f64,
    pub train_tiles: usize,
    pub test_tiles: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            tile_size: 64,
            max_depth: 4,
            cells_per_class: 2,
            noise: 0.15,
            tint: 0.1,
            train_tiles: 64,
            test_tiles: 16,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(2..=8).contains(&self.classes) {
            problems.push(format!("classes must be in 2..=8, got {}", self.classes));
        }
        let div = 1usize << self.max_depth.min(16);
        if self.tile_size == 0 || self.tile_size % div != 0 {
            problems.push(format!("tile size {} is not divisible by 2^{} = {div}", self.tile_size, self.max_depth));
        }
        if self.cells_per_class == 0 {
            problems.push("cells_per_class must be at least 1".into());
        }
        if !(self.noise >= 0.0) || !(self.tint >= 0.0) {
            problems.push("noise and tint must be non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Class textures: geometrically spaced frequencies from coarse to fine,
    /// evenly spread orientations and random color offsets.
    pub fn textures(&self) -> Vec<Texture> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7e47_u64);
        let (lo, hi): (f64, f64) = (1.0 / 20.0, 1.0 / 3.0);
        let mut order: Vec<usize> = (0..self.classes).collect();
        order.shuffle(&mut rng);
        (0..self.classes)
            .map(|c| {
                let t = if self.classes > 1 { order[c] as f64 / (self.classes - 1) as f64 } else { 0.0 };
                let color = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                Texture {
                    frequency: lo * (hi / lo).powf(t),
                    orientation: PI * c as f64 / self.classes as f64 + rng.gen_range(-0.1..0.1),
                    color,
                }
            })
            .collect()
    }

    /// Renders tile `index` of the stream identified by `stream`: an RGB image
    /// in `[0, 1]` (planar) and its label map.
    pub fn render_tile(&self, stream: u64, index: u64, textures: &[Texture]) -> (Vec<f64>, Vec<u8>) {
        let t = self.tile_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng.set_word_pos(index as u128 * (1 << 40));
        let sites: Vec<(f64, f64, u8, f64)> = (0..self.classes * self.cells_per_class)
            .map(|k| {
                (
                    rng.gen_range(0.0..t as f64),
                    rng.gen_range(0.0..t as f64),
                    (k % self.classes) as u8,
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let mut labels = vec![0u8; t * t];
        let mut img = vec![0.0; 3 * t * t];
        for y in 0..t {
            for x in 0..t {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (k, s) in sites.iter().enumerate() {
                    let d = (s.0 - px).powi(2) + (s.1 - py).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                let (_, _, class, phase) = sites[best];
                let tex = &textures[class as usize];
                let u = px * tex.orientation.cos() + py * tex.orientation.sin();
                let s = (2.0 * PI * tex.frequency * u + phase).sin();
                labels[y * t + x] = class;
                for c in 0..3 {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let v = 0.5 + 0.3 * s + self.tint * tex.color[c] + self.noise * noise;
                    img[c * t * t + y * t + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        (img, labels)
    }
}

fn save_pair(root: &Path, split: Split, name: &str, img: &[f64], labels: &[u8], t: usize) -> Result<Pair> {
    let pair = Pair {
        image: format!("{}/images/{name}.png", split.dir()),
        mask: format!("{}/masks/{name}.png", split.dir()),
    };
    let rgb = RgbImage::from_fn(t as u32, t as u32, |x, y| {
        let i = y as usize * t + x as usize;
        image::Rgb([0, 1, 2].map(|c| (img[c * t * t + i] * 255.0).round() as u8))
    });
    let mask = GrayImage::from_fn(t as u32, t as u32, |x, y| image::Luma([labels[y as usize * t + x as usize]]));
    let ipath = root.join(&pair.image);
    let mpath = root.join(&pair.mask);
    rgb.save(&ipath).map_err(|source| Error::Image { path: ipath, source })?;
    mask.save(&mpath).map_err(|source| Error::Image { path: mpath, source })?;
    Ok(pair)
}

/// Writes a synthetic dataset under `root` and returns its manifest (also saved there).
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let textures = spec.textures();
    let mut manifest = DatasetManifest {
        classes: spec.classes,
        channels: 3,
        tile_size: spec.tile_size,
        stride: spec.tile_size,
        mean: vec![0.0; 3],
        std: vec![1.0; 3],
        train: Vec::new(),
        test: Vec::new(),
        synthetic: Some(spec.clone()),
    };
    for (split, count, stream) in [(Split::Train, spec.train_tiles, 1u64), (Split::Test, spec.test_tiles, 2u64)] {
        for sub in ["images", "masks"] {
            let dir: PathBuf = root.join(split.dir()).join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let width = count.max(1).to_string().len();
        for k in 0..count {
            let (img, labels) = spec.render_tile(stream, k as u64, &textures);
            let pair = save_pair(root, split, &format!("tile_{k:0width$}"), &img, &labels, spec.tile_size)?;
            match split {
                Split::Train => manifest.train.push(pair),
                Split::Test => manifest.test.push(pair),
            }
        }
    }
    manifest.compute_stats(root)?;
    manifest.save(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::argmax_labels;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn sample(c: usize, t: usize, seed: u64) -> (Tensor<f32>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_vec(&[c, t, t], (0..c * t * t).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let labels = (0..t * t).map(|_| rng.gen_range(0..3u8)).collect();
        (img, labels)
    }

    fn histogram(l: &[u8]) -> [usize; 4] {
        let mut h = [0; 4];
        l.iter().for_each(|&v| h[v as usize] += 1);
        h
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[&[0, 0, 0, 0]], 2).unwrap(), vec![0.0, 1.0]);
        assert_eq!(class_weights(&[&[0, 1], &[1, 0]], 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(class_weights(&[&[0, 0, 0, 1]], 2).unwrap(), vec![0.25, 0.75]);
        assert!(class_weights(&[], 2).is_err());
    }

    #[test]
    fn flips_are_involutions_and_keep_histograms() {
        let (img, lab) = sample(3, 8, 1);
        let (a, b) = hflip(&img, &lab);
        assert_eq!(histogram(&b), histogram(&lab));
        assert_ne!(b, lab);
        assert_eq!(hflip(&a, &b), (img.clone(), lab.clone()));
        let (a, b) = vflip(&img, &lab);
        assert_eq!(vflip(&a, &b), (img, lab));
    }

    #[test]
    fn augmentation_is_seeded_and_paired() {
        let (img, lab) = sample(1, 16, 2);
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&img, &lab, 9, &cfg), augment(&img, &lab, 9, &cfg));
        // image and labels receive the same spatial map: encode labels into the image
        let tagged = Tensor::from_vec(&[1, 16, 16], lab.iter().map(|&v| v as f32).collect()).unwrap();
        for seed in 0..20 {
            let (a, b) = augment(&tagged, &lab, seed, &cfg);
            assert!(a.data().iter().zip(&b).all(|(x, &y)| *x == y as f32));
        }
        let none = AugmentConfig { flips: false, shift_margin: 0.0 };
        assert_eq!(augment(&img, &lab, 3, &none), (img, lab));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!((-2..7).map(|i| reflect(i, 4)).collect::<Vec<_>>(), vec![2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(tile_origins(1024, 512, 512), vec![0, 512]);
        assert_eq!(tile_origins(100, 64, 32), vec![0, 32]);
        assert!(tile_origins(10, 16, 16).is_empty());
    }

    #[test]
    fn synthetic_rejects_indivisible_tiles() {
        let spec = SyntheticSpec { tile_size: 40, max_depth: 4, ..Default::default() };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn every_tile_contains_every_class() {
        let spec = SyntheticSpec { tile_size: 32, ..Default::default() };
        let tex = spec.textures();
        for k in 0..10 {
            let (_, labels) = spec.render_tile(1, k, &tex);
            assert!(histogram(&labels).iter().take(spec.classes).all(|&n| n > 0));
        }
    }

    proptest! {
        #[test]
        fn one_hot_round_trip(labels in proptest::collection::vec(0u8..5, 36)) {
            let t = one_hot::<f32>(&labels, 6, 6, 5).unwrap();
            prop_assert_eq!(argmax_labels(&t), labels);
        }
    }
}
