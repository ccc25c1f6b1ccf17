//! Datasets: the 1-D toy regression problem and IDX (MNIST) images.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::brownian::derive_seed;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Regression or classification targets, indexed like the inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, classes } => {
                Targets::Classes { labels: idx.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inputs `[N, ...]`, targets, and a stable id per example (its index in
/// the source data) used to derive per-batch seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub inputs: Tensor<T>,
    pub targets: Targets,
    pub ids: Vec<u64>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, targets: Targets) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != targets.len() {
            return Err(Error::shape(format!("{n} inputs but {} targets", targets.len())));
        }
        Ok(Self { inputs, targets, ids: (0..n as u64).collect() })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Contiguous batches of `batch_size` over `order`; the last may be short.
    pub fn batches<'a>(&'a self, order: &'a [usize], batch_size: usize) -> impl Iterator<Item = Dataset<T>> + 'a {
        order.chunks(batch_size.max(1)).map(move |idx| self.select(idx))
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset<T> {
        let per: usize = self.example_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        Dataset {
            inputs: Tensor::from_parts(shape, data),
            targets: self.targets.select(idx),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// A deterministic subset of `n` examples (a seeded permutation
    /// prefix, kept in source order). Returns everything when `n >= len`.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset<T> {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5AB5E7])));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// Order-independent key of a set of example ids; seeds the weight path
/// shared by a minibatch.
pub fn batch_key(ids: &[u64]) -> u64 {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.push(ids.len() as u64);
    derive_seed(&sorted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub n: usize,
    pub x_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { n: 200, x_range: (-2.5, 2.5), noise_std: 0.1, seed: 0 }
    }
}

/// The fixed non-monotonic toy target: a damped sine, `sin(2x) exp(-x²/8)`.
pub fn toy_target(x: f64) -> f64 {
    (2.0 * x).sin() * (-x * x / 8.0).exp()
}

/// `x ~ U(x_range)`, `y = toy_target(x) + N(0, noise_std²)`.
pub fn make_toy_regression(cfg: &ToyConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if cfg.n == 0 {
        return Err(Error::config("toy dataset needs n > 0"));
    }
    let (lo, hi) = cfg.x_range;
    if !(lo < hi) {
        return Err(Error::config(format!("empty toy x_range ({lo}, {hi})")));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::config("noise_std must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let xs: Vec<f64> = (0..cfg.n).map(|_| rng.random_range(lo..hi)).collect();
    let ys = xs.iter().map(|&x| toy_target(x) + cfg.noise_std * noise.sample(&mut rng)).collect();
    Ok((xs, ys))
}

pub fn toy_dataset<T: Scalar>(cfg: &ToyConfig) -> Result<Dataset<T>> {
    let (xs, ys) = make_toy_regression(cfg)?;
    Dataset::new(Tensor::from_f64([xs.len(), 1], &xs)?, Targets::Values(ys))
}

/// `x,y` rows with a header.
pub fn write_toy_csv(path: &Path, xs: &[f64], ys: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y")?;
    for (x, y) in xs.iter().zip(ys) {
        writeln!(f, "{x},{y}")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Raw 8-bit images plus labels, as stored in the IDX files.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, row-major per image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    /// Applied after scaling to `[0, 1]`.
    pub mean: f64,
    pub std: f64,
}

/// Standard MNIST normalisation constants.
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset, message: "truncated header".into() })
}

/// Parse an IDX image file (`magic, count, rows, cols, pixels`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad image magic {magic:#010x}") });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: 16 + payload.len(),
            message: format!("expected {need} pixel bytes, found {}", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Format { offset: 16 + need, message: "trailing bytes after pixel data".into() });
    }
    Ok((count, rows, cols, payload.to_vec()))
}

/// Parse an IDX label file (`magic, count, labels`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad label magic {magic:#010x}") });
    }
    let count = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Format {
            offset: 8 + payload.len().min(count),
            message: format!("expected {count} labels, found {}", payload.len()),
        });
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[u8]) -> Vec<u8> {
    let count = images.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(images);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load an image file and its label file.
pub fn load_idx_images(images: &Path, labels: &Path, split: Split) -> Result<ImageDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != count {
        return Err(Error::Format { offset: 4, message: format!("{count} images but {} labels", labels.len()) });
    }
    let num_classes = 10;
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Format { offset: 8, message: format!("label {bad} out of range") });
    }
    Ok(ImageDataset { split, rows, cols, images: pixels, labels, num_classes, mean: MNIST_MEAN, std: MNIST_STD })
}

/// File names of the standard MNIST distribution.
pub fn mnist_files(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<ImageDataset> {
    let (img, lbl) = mnist_files(split);
    load_idx_images(&dir.join(img), &dir.join(lbl), split)
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Scale to `[0, 1]`, normalise, average-pool by `pool` (1 keeps the
    /// resolution) and return `[N, 1, rows / pool, cols / pool]` inputs.
    pub fn to_dataset<T: Scalar>(&self, pool: usize) -> Result<Dataset<T>> {
        if pool == 0 || self.rows % pool != 0 || self.cols % pool != 0 {
            return Err(Error::config(format!("pool {pool} does not divide {}x{}", self.rows, self.cols)));
        }
        let (r, c) = (self.rows / pool, self.cols / pool);
        let area = (pool * pool) as f64;
        let mut data = Vec::with_capacity(self.len() * r * c);
        for img in self.images.chunks(self.rows * self.cols) {
            for i in 0..r {
                for j in 0..c {
                    let mut acc = 0.0;
                    for di in 0..pool {
                        for dj in 0..pool {
                            acc += img[(i * pool + di) * self.cols + j * pool + dj] as f64;
                        }
                    }
                    let v = acc / area / 255.0;
                    data.push(T::lit((v - self.mean) / self.std));
                }
            }
        }
        Dataset::new(
            Tensor::new(vec![self.len(), 1, r, c], data)?,
            Targets::Classes { labels: self.labels.iter().map(|&l| l as usize).collect(), classes: self.num_classes },
        )
    }
}
