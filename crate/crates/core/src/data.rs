//! Datasets: IDX ingestion, a seeded synthetic shapes generator, per-channel
//! z-normalization, and crop/resize/flip augmentation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputNorm;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const STD_FLOOR: f64 = 1e-8;

/// Images `[N, C, H, W]` with pixel values in `[0, 1]` plus class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dataset(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Gathers the listed samples into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty subset".into()));
        }
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape();
        Dataset::new(
            Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
            self.num_classes,
        )
    }

    /// Seeded, stratified split; returns `(rest, held_out)` where `held_out`
    /// takes `round(fraction * class_count)` samples of every class (at
    /// least one when the class has two or more samples).
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("split fraction {fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rest = Vec::new();
        let mut held = Vec::new();
        for class in 0..self.num_classes {
            let mut members: Vec<usize> =
                (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            shuffle(&mut members, &mut rng);
            let mut k = (fraction * members.len() as f64).round() as usize;
            if k == 0 && fraction > 0.0 && members.len() >= 2 {
                k = 1;
            }
            held.extend_from_slice(&members[..k]);
            rest.extend_from_slice(&members[k..]);
        }
        rest.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&rest)?, self.subset(&held)?))
    }
}

/// Fisher-Yates shuffle driven by `rng`.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Dataset(format!("{what}: truncated IDX header")))
}

/// Parses an IDX image file (`0x00000803`, `u8` pixels) into `[N, 1, H, W]`
/// scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!(
            "images: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = read_be_u32(bytes, 4, "images")? as usize;
    let h = read_be_u32(bytes, 8, "images")? as usize;
    let w = read_be_u32(bytes, 12, "images")? as usize;
    let pixels = bytes
        .get(16..16 + n * h * w)
        .ok_or_else(|| Error::Dataset("images: truncated pixel data".into()))?;
    Tensor::new(
        &[n, 1, h, w],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!(
            "labels: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n = read_be_u32(bytes, 4, "labels")? as usize;
    let labels = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Dataset("labels: truncated label data".into()))?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Dataset(format!(
            "count mismatch: {} images, {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, num_classes)
}

pub const SYNTH_MIN_HW: usize = 12;
pub const SYNTH_MAX_CLASSES: usize = 4;
pub const SYNTH_NOISE: f64 = 0.05;

/// Parameters that fully determine a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub hw: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Train set from `seed`, test set (a quarter of the size, at least one
    /// per class) from a derived seed.
    pub fn train_test(&self) -> Result<(Dataset, Dataset)> {
        let train = synth_shapes(self.n_per_class, self.num_classes, self.hw, self.seed)?;
        let test_n = self.n_per_class.div_ceil(4).max(1);
        let test = synth_shapes(
            test_n,
            self.num_classes,
            self.hw,
            self.seed ^ 0x9E37_79B9_7F4A_7C15,
        )?;
        Ok((train, test))
    }
}

/// Single-channel `hw × hw` renderings of up to four shape classes
/// (filled square, ring, cross, horizontal stripes) with jittered position
/// and scale plus Gaussian pixel noise, clamped to `[0, 1]`. Samples are
/// interleaved by class.
pub fn synth_shapes(n_per_class: usize, num_classes: usize, hw: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > SYNTH_MAX_CLASSES {
        return Err(Error::Dataset(format!(
            "synthetic dataset supports 1..={SYNTH_MAX_CLASSES} classes, got {num_classes}"
        )));
    }
    if hw < SYNTH_MIN_HW {
        return Err(Error::Dataset(format!(
            "synthetic images need hw >= {SYNTH_MIN_HW}, got {hw}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Dataset("n_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * hw * hw);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for class in 0..num_classes {
            render_shape(class, hw, &mut rng, &mut data);
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(&[n, 1, hw, hw], data)?, labels, num_classes)
}

fn render_shape(class: usize, hw: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let size = hw as f64;
    let half = size * rng.random_range(0.28..0.38);
    let jitter = size * 0.08;
    let cx = size / 2.0 + rng.random_range(-jitter..jitter);
    let cy = size / 2.0 + rng.random_range(-jitter..jitter);
    let stroke = (size * 0.1).max(1.5);
    for y in 0..hw {
        for x in 0..hw {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match class {
                0 => dx.abs() <= half && dy.abs() <= half,
                1 => {
                    let r = (dx * dx + dy * dy).sqrt();
                    (r - half).abs() <= stroke / 2.0 + 0.25
                }
                2 => {
                    (dx.abs() <= stroke / 2.0 && dy.abs() <= half)
                        || (dy.abs() <= stroke / 2.0 && dx.abs() <= half)
                }
                _ => {
                    dx.abs() <= half
                        && dy.abs() <= half
                        && ((dy + half) / stroke).floor() as i64 % 2 == 0
                }
            };
            let base = if inside { 0.9 } else { 0.1 };
            let noise: f64 = rng.sample(StandardNormal);
            out.push((base + SYNTH_NOISE * noise).clamp(0.0, 1.0));
        }
    }
}

/// Per-channel mean and standard deviation of a training set, with the
/// deviation floored at [`STD_FLOOR`].
pub fn znorm_stats(train: &Dataset) -> Result<InputNorm> {
    if train.is_empty() {
        return Err(Error::Dataset("cannot compute statistics of an empty dataset".into()));
    }
    let [c, h, w] = train.sample_shape();
    let plane = h * w;
    let count = (train.len() * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..train.len() {
        let s = train.sample(i);
        for ch in 0..c {
            mean[ch] += s[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for i in 0..train.len() {
        let s = train.sample(i);
        for ch in 0..c {
            var[ch] += s[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count).sqrt().max(STD_FLOOR))
        .collect();
    Ok(InputNorm { mean, std })
}

/// Normalizes a `[N, C, H, W]` batch in place.
pub fn apply_znorm_in_place(data: &mut [f64], channels: usize, plane: usize, stats: &InputNorm) {
    for (k, v) in data.iter_mut().enumerate() {
        let ch = (k / plane) % channels;
        *v = (*v - stats.mean[ch]) / stats.std[ch].max(STD_FLOOR);
    }
}

pub fn apply_znorm(batch: &Tensor, stats: &InputNorm) -> Result<Tensor> {
    let &[_, c, h, w] = batch.shape() else {
        return Err(Error::shape(format!("expected [N,C,H,W], got {:?}", batch.shape())));
    };
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::shape(format!(
            "statistics have {} channels, batch has {c}",
            stats.mean.len()
        )));
    }
    let mut data = batch.data().to_vec();
    apply_znorm_in_place(&mut data, c, h * w, stats);
    Tensor::new(batch.shape(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_fraction: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_fraction: 0.8,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "crop_fraction {} outside (0, 1]",
                self.crop_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Random crop of `floor(f·H) × floor(f·W)`, bilinear resize back to `H × W`,
/// then a horizontal flip with probability `flip_prob`. Works on one
/// `[C, H, W]` sample.
pub fn augment_sample(
    sample: &[f64],
    [c, h, w]: [usize; 3],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let ch = ((cfg.crop_fraction * h as f64).floor() as usize).clamp(1, h);
    let cw = ((cfg.crop_fraction * w as f64).floor() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let mut out = if ch == h && cw == w {
        sample.to_vec()
    } else {
        resize_crop(sample, [c, h, w], y0, x0, ch, cw)
    };
    if flip {
        flip_horizontal(&mut out, [c, h, w]);
    }
    out
}

fn resize_crop(
    src: &[f64],
    [c, h, w]: [usize; 3],
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
) -> Vec<f64> {
    // Align-corners bilinear sampling: output corners hit crop corners, so
    // every output is a convex combination of crop pixels.
    let coord = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        if out_n == 1 || in_n == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
        let lo = (pos.floor() as usize).min(in_n - 1);
        let hi = (lo + 1).min(in_n - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        let plane = &src[k * h * w..(k + 1) * h * w];
        for oy in 0..h {
            let (ya, yb, ty) = coord(oy, h, ch);
            for ox in 0..w {
                let (xa, xb, tx) = coord(ox, w, cw);
                let p = |y: usize, x: usize| plane[(y0 + y) * w + x0 + x];
                let top = p(ya, xa) * (1.0 - tx) + p(ya, xb) * tx;
                let bottom = p(yb, xa) * (1.0 - tx) + p(yb, xb) * tx;
                out[(k * h + oy) * w + ox] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

pub fn flip_horizontal(sample: &mut [f64], [c, h, w]: [usize; 3]) {
    for row in sample[..c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Augments every sample of a batch; sample `i` draws from its own stream
/// seeded by `(seed, i)` so results do not depend on scheduling.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::shape(format!("expected [N,C,H,W], got {:?}", batch.shape())));
    };
    let len = c * h * w;
    let mut data = Vec::with_capacity(batch.len());
    for i in 0..n {
        let mut rng = sample_rng(seed, i as u64);
        data.extend(augment_sample(&batch.data()[i * len..(i + 1) * len], [c, h, w], cfg, &mut rng));
    }
    Tensor::new(batch.shape(), data)
}

/// Deterministic per-sample stream derived from a base seed.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
