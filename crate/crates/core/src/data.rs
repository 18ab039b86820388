//! Dataset loading, normalisation, augmentation and deterministic batching.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` (unnormalised), labels, and the per-channel constants
/// used to normalise batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "dataset: {} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if mean.len() != images.shape()[1] || std.len() != mean.len() || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("dataset: normalisation constants do not match the channel count"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("dataset: label {bad} ≥ {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// The first `n` examples (all of them if `n` is 0 or too large).
    pub fn take(&self, n: usize) -> Dataset {
        let n = if n == 0 { self.len() } else { n.min(self.len()) };
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset {
            images: Tensor::new(shape, self.images.data()[..n * self.image_len()].to_vec()).expect("prefix"),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Tensor::zeros(&[0, 0, 0, 0]),
            labels: Vec::new(),
            classes: self.classes,
            split: self.split,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    /// Channels-first batch of the given examples, normalised.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        let raw = Tensor::new(shape, data).expect("gathered images");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (normalize(&raw, &self.mean, &self.std), labels)
    }
}

fn per_channel(x: &Tensor, mean: &[f64], std: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let c = mean.len();
    let plane = x.len() / (x.shape()[0] * c).max(1);
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let (m, s) = (mean[i % c], std[i % c]);
        chunk.iter_mut().for_each(|v| *v = f(*v, m, s));
    }
    out
}

/// `(x − mean) / std` per channel of an NCHW tensor.
pub fn normalize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    per_channel(x, mean, std, |v, m, s| (v - m) / s)
}

pub fn denormalize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    per_channel(x, mean, std, |v, m, s| v * s + m)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses one CIFAR-10 binary batch file (3073-byte records: a label byte,
/// then the R, G and B planes of a 32×32 image).
pub fn load_cifar10(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let raw = read_file(path)?;
    if raw.is_empty() || raw.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", raw.len()),
        ));
    }
    let n = raw.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, record) in raw.chunks(CIFAR_RECORD).enumerate() {
        if record[0] > 9 {
            return Err(Error::format(path, format!("record {i}: label byte {}", record[0])));
        }
        labels.push(record[0] as usize);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        10,
        split,
        CIFAR10_MEAN.to_vec(),
        CIFAR10_STD.to_vec(),
    )
}

/// Loads `data_batch_1..5.bin` (train) or `test_batch.bin` (test) from the
/// standard CIFAR-10 binary directory.
pub fn load_cifar10_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let parts = files
        .iter()
        .map(|f| load_cifar10(dir.join(f), split))
        .collect::<Result<Vec<_>>>()?;
    concat(parts)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::invalid("no dataset parts"))?.clone_meta();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let shape = parts[0].images.shape().to_vec();
    for p in parts {
        labels.extend(p.labels);
        data.extend(p.images.into_data());
    }
    let mut shape = shape;
    shape[0] = labels.len();
    Dataset::new(Tensor::new(shape, data)?, labels, first.classes, first.split, first.mean, first.std)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .ok_or_else(|| Error::format(path, "truncated IDX header"))
}

/// Reads an MNIST IDX image/label pair; gzip-compressed files are detected
/// and inflated transparently.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let img = read_file(ipath)?;
    let lab = read_file(lpath)?;
    if be_u32(&img, 0, ipath)? != 0x803 {
        return Err(Error::format(ipath, "bad magic (expected 0x00000803)"));
    }
    if be_u32(&lab, 0, lpath)? != 0x801 {
        return Err(Error::format(lpath, "bad magic (expected 0x00000801)"));
    }
    let (n, rows, cols) = (be_u32(&img, 4, ipath)?, be_u32(&img, 8, ipath)?, be_u32(&img, 12, ipath)?);
    let nl = be_u32(&lab, 4, lpath)?;
    if n != nl {
        return Err(Error::format(ipath, format!("{n} images but {nl} labels")));
    }
    if img.len() != 16 + n * rows * cols {
        return Err(Error::format(ipath, format!("payload is {} bytes, header promises {}", img.len() - 16, n * rows * cols)));
    }
    if lab.len() != 8 + n {
        return Err(Error::format(lpath, format!("payload is {} bytes, header promises {n}", lab.len() - 8)));
    }
    if let Some(bad) = lab[8..].iter().find(|&&l| l > 9) {
        return Err(Error::format(lpath, format!("label {bad} out of range")));
    }
    let pixels = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], pixels)?,
        lab[8..].iter().map(|&l| l as usize).collect(),
        10,
        split,
        vec![MNIST_MEAN],
        vec![MNIST_STD],
    )
}

/// Loads `{train,t10k|test}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefixes: &[&str] = match split {
        Split::Train => &["train"],
        Split::Test => &["t10k", "test"],
    };
    let find = |kind: &str| {
        prefixes
            .iter()
            .flat_map(|p| ["", ".gz"].map(|ext| dir.join(format!("{p}-{kind}-ubyte{ext}"))))
            .find(|p| p.exists())
            .ok_or_else(|| Error::invalid(format!("no MNIST {kind} file for {split:?} in {}", dir.display())))
    };
    load_mnist_idx(find("images-idx3")?, find("labels-idx1")?, split)
}

/// Class-conditional Gaussian blobs on a few fixed spatial templates;
/// separable enough for a small CNN to fit in a handful of epochs.
pub fn synthetic(seed: u64, n: usize, classes: usize, image_shape: &[usize], split: Split) -> Result<Dataset> {
    if classes == 0 || image_shape.len() != 3 {
        return Err(Error::invalid("synthetic: need ≥ 1 class and a [C, H, W] shape"));
    }
    let len: usize = image_shape.iter().product();
    let mut template_rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..len).map(|_| template_rng.gen_range(0.2..0.8)).collect())
        .collect();
    let salt = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (salt << 32));
    let noise = Normal::new(0.0, 0.1).expect("positive std");
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * len);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        pixels.extend(templates[label].iter().map(|&t| (t + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(image_shape);
    let c = image_shape[0];
    Dataset::new(Tensor::new(shape, pixels)?, labels, classes, split, vec![0.5; c], vec![0.25; c])
}

/// Shuffle and augmentation settings. Batch order and augmentation are pure
/// functions of `(seed, epoch)` and `(seed, epoch, index)` respectively.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStream {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Zero-padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
    pub drop_last: bool,
}

impl BatchStream {
    pub fn train(batch_size: usize, seed: u64) -> Self {
        BatchStream {
            batch_size,
            seed,
            shuffle: true,
            crop_pad: 0,
            flip: false,
            drop_last: true,
        }
    }

    pub fn eval(batch_size: usize) -> Self {
        BatchStream {
            batch_size,
            seed: 0,
            shuffle: false,
            crop_pad: 0,
            flip: false,
            drop_last: false,
        }
    }

    pub fn with_augmentation(mut self, crop_pad: usize, flip: bool) -> Self {
        self.crop_pad = crop_pad;
        self.flip = flip;
        self
    }

    fn rng(&self, epoch: u64, tag: &[u8; 8], stream: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&epoch.to_le_bytes());
        key[16..24].copy_from_slice(tag);
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng
    }

    /// The epoch's visiting order.
    pub fn order(&self, len: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        if self.shuffle {
            order.shuffle(&mut self.rng(epoch, b"shuffle\0", 0));
        }
        order
    }

    /// Crop offsets `(dy, dx)` in `0..=2·pad` and flip decision for one
    /// example of one epoch.
    pub fn augmentation(&self, epoch: u64, index: usize) -> (usize, usize, bool) {
        let mut rng = self.rng(epoch, b"augment\0", index as u64);
        let span = 2 * self.crop_pad + 1;
        let dy = rng.gen_range(0..span);
        let dx = rng.gen_range(0..span);
        let flip = self.flip && rng.gen_bool(0.5);
        (dy, dx, flip)
    }
}

/// One mini-batch: normalised images, labels, source indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Shifts a `[C, H, W]` image by a crop of a `pad`-zero-padded copy at
/// offset `(dy, dx)`, optionally mirrored horizontally.
pub fn crop_flip(image: &[f64], shape: &[usize], pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y + dy) as isize - pad as isize;
                let sx_unflipped = if flip { w - 1 - x } else { x };
                let sx = (sx_unflipped + dx) as isize - pad as isize;
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Batches of one epoch. With `drop_last`, a final partial batch is
/// skipped and batch sizes below 2 are rejected.
pub fn batches(dataset: &Dataset, stream: &BatchStream, epoch: u64) -> Result<Vec<Batch>> {
    if stream.batch_size == 0 || (stream.drop_last && stream.batch_size < 2) {
        return Err(Error::invalid(format!(
            "batch size {} is too small for training (batch norm needs ≥ 2)",
            stream.batch_size
        )));
    }
    let order = stream.order(dataset.len(), epoch);
    let augment = stream.crop_pad > 0 || stream.flip;
    let shape = dataset.image_shape().to_vec();
    let mut out = Vec::new();
    for chunk in order.chunks(stream.batch_size) {
        if stream.drop_last && chunk.len() < stream.batch_size {
            break;
        }
        let (images, labels) = if augment {
            let mut data = Vec::with_capacity(chunk.len() * dataset.image_len());
            for &i in chunk {
                let (dy, dx, flip) = stream.augmentation(epoch, i);
                data.extend(crop_flip(dataset.image(i), &shape, stream.crop_pad, dy, dx, flip));
            }
            let mut full = vec![chunk.len()];
            full.extend_from_slice(&shape);
            let raw = Tensor::new(full, data)?;
            (
                normalize(&raw, &dataset.mean, &dataset.std),
                chunk.iter().map(|&i| dataset.labels[i]).collect(),
            )
        } else {
            dataset.gather(chunk)
        };
        out.push(Batch {
            images,
            labels,
            indices: chunk.to_vec(),
        });
    }
    Ok(out)
}
