//! MNIST (IDX) and CIFAR-10 (binary) loaders, per-pixel mean subtraction,
//! crop/flip augmentation and seeded mini-batch streams.
//!
//! Pixels are kept as raw bytes; a sample becomes `v / 255 - mean` only when
//! a batch is assembled.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn classes(self) -> usize {
        10
    }

    /// Subdirectory of the dataset root holding this dataset's files.
    pub fn subdir(self) -> &'static str {
        self.name()
    }

    /// Loads `(train, test)` from `dir`.
    pub fn load(self, dir: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetKind::Mnist => load_mnist(dir),
            DatasetKind::Cifar10 => load_cifar10(dir),
        }
    }

    /// Crop-and-flip for CIFAR-10; nothing for MNIST.
    pub fn default_augment(self) -> AugmentConfig {
        match self {
            DatasetKind::Mnist => AugmentConfig::none(),
            DatasetKind::Cifar10 => AugmentConfig {
                enabled: true,
                crop_pad: 4,
                flip_prob: 0.5,
            },
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected mnist or cifar10)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images stored as bytes `(n, c, h, w)` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    split: Split,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    /// Per-pixel mean of the training split, in `[0, 1]` units.
    mean: Vec<f64>,
}

impl Dataset {
    /// Builds a split from raw bytes. A training split computes its own mean
    /// image; a test split starts with a zero mean until [`Dataset::with_mean_of`].
    pub fn from_raw(kind: DatasetKind, split: Split, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let sample = kind.input_shape().iter().product::<usize>();
        if pixels.len() != labels.len() * sample {
            return Err(Error::Config(format!(
                "{} {} pixels for {} labels",
                kind.name(),
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= kind.classes()) {
            return Err(Error::Config(format!("label {l} outside 0..{}", kind.classes())));
        }
        let mut ds = Dataset {
            kind,
            split,
            pixels,
            labels,
            mean: vec![0.0; sample],
        };
        if split == Split::Train {
            ds.mean = ds.pixel_mean();
        }
        Ok(ds)
    }

    fn pixel_mean(&self) -> Vec<f64> {
        let sample = self.sample_len();
        let mut acc = vec![0u64; sample];
        for img in self.pixels.chunks_exact(sample) {
            for (a, &p) in acc.iter_mut().zip(img) {
                *a += p as u64;
            }
        }
        let n = self.len().max(1) as f64;
        acc.into_iter().map(|a| a as f64 / 255.0 / n).collect()
    }

    /// Uses the mean image of `train` (for test splits and subsets).
    pub fn with_mean_of(mut self, train: &Dataset) -> Self {
        self.mean = train.mean.clone();
        self
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.kind.input_shape()
    }

    fn sample_len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn mean_image(&self) -> &[f64] {
        &self.mean
    }

    /// Raw bytes of sample `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.sample_len();
        &self.pixels[i * s..(i + 1) * s]
    }

    /// All images as `(n, c, h, w)` with values `v / 255`.
    pub fn images<T: Element>(&self) -> Tensor<T> {
        let [c, h, w] = self.shape();
        let data = self.pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
        Tensor::new([self.len(), c, h, w], data).expect("consistent by construction")
    }

    /// First `n` samples (all when `n` exceeds the size); the mean image is kept.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            kind: self.kind,
            split: self.split,
            pixels: self.pixels[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            mean: self.mean.clone(),
        }
    }

    /// Writes a sample into `out` as `v / 255 - mean`, padded with zeros by
    /// `pad`, cropped back at offset `(dy, dx)` and optionally mirrored.
    fn render<T: Element>(&self, i: usize, pad: usize, dy: usize, dx: usize, flip: bool, out: &mut [T]) {
        let [c, h, w] = self.shape();
        let img = self.image(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y + dy) as isize - pad as isize;
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = (sx0 + dx) as isize - pad as isize;
                    let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        let j = (ch * h + sy as usize) * w + sx as usize;
                        img[j] as f64 / 255.0 - self.mean[j]
                    } else {
                        0.0
                    };
                    out[(ch * h + y) * w + x] = T::of(v);
                }
            }
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

/// Parses an IDX file, returning its dimensions and payload.
pub fn parse_idx(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0).ok_or_else(|| Error::format(path, "truncated header"))?;
    if found != magic {
        return Err(Error::format(
            path,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let v = be_u32(bytes, 4 + 4 * d).ok_or_else(|| Error::format(path, "truncated header"))?;
        dims.push(v as usize);
    }
    let header = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let have = bytes.len() - header;
    if have != want {
        return Err(Error::format(
            path,
            format!("truncated or oversized payload: {have} bytes, header promises {want}"),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn load_mnist_split(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let ipath = dir.join(images);
    let lpath = dir.join(labels);
    let (idims, pixels) = parse_idx(&ipath, &read(&ipath)?, MNIST_IMAGE_MAGIC)?;
    let (ldims, labels) = parse_idx(&lpath, &read(&lpath)?, MNIST_LABEL_MAGIC)?;
    if idims[1..] != [28, 28] {
        return Err(Error::format(
            &ipath,
            format!("images are {}x{}, expected 28x28", idims[1], idims[2]),
        ));
    }
    if idims[0] != ldims[0] {
        return Err(Error::format(
            &lpath,
            format!("count mismatch: {} labels for {} images", ldims[0], idims[0]),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::format(&lpath, format!("label {l} outside 0..10")));
    }
    Dataset::from_raw(DatasetKind::Mnist, split, pixels, labels)
}

/// Loads the four MNIST IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_split(dir, MNIST_FILES[0], MNIST_FILES[1], Split::Train)?;
    let test = load_mnist_split(dir, MNIST_FILES[2], MNIST_FILES[3], Split::Test)?.with_mean_of(&train);
    Ok((train, test))
}

/// Parses CIFAR-10 binary records into `(pixels, labels)`.
pub fn parse_cifar(path: &Path, bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            path,
            format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                path,
                format!("record {i}: label {} outside 0..10", rec[0]),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Loads CIFAR-10 from `dir`: every `data_batch_{1..5}.bin` present (at least
/// one) as the training split and `test_batch.bin` as the test split.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut found = 0;
    for name in CIFAR_TRAIN_FILES {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let (p, l) = parse_cifar(&path, &read(&path)?)?;
        pixels.extend(p);
        labels.extend(l);
        found += 1;
    }
    if found == 0 {
        return Err(Error::io(
            dir.join(CIFAR_TRAIN_FILES[0]),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 training batches"),
        ));
    }
    let train = Dataset::from_raw(DatasetKind::Cifar10, Split::Train, pixels, labels)?;
    let path = dir.join(CIFAR_TEST_FILE);
    let (p, l) = parse_cifar(&path, &read(&path)?)?;
    let test = Dataset::from_raw(DatasetKind::Cifar10, Split::Test, p, l)?.with_mean_of(&train);
    Ok((train, test))
}

/// Encodes an IDX file with the given magic and dimensions.
pub fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Encodes samples as CIFAR-10 binary records.
pub fn encode_cifar(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend_from_slice(ds.image(i));
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `(train, test)` into `dir` in the on-disk layout the loaders read.
pub fn write_dataset(dir: &Path, train: &Dataset, test: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    match train.kind {
        DatasetKind::Mnist => {
            for (ds, names) in [(train, &MNIST_FILES[..2]), (test, &MNIST_FILES[2..])] {
                let ipath = dir.join(names[0]);
                write(&ipath, &encode_idx(MNIST_IMAGE_MAGIC, &[ds.len(), 28, 28], &ds.pixels))?;
                let lpath = dir.join(names[1]);
                write(&lpath, &encode_idx(MNIST_LABEL_MAGIC, &[ds.len()], &ds.labels))?;
                written.extend([ipath, lpath]);
            }
        }
        DatasetKind::Cifar10 => {
            let path = dir.join(CIFAR_TRAIN_FILES[0]);
            write(&path, &encode_cifar(train))?;
            let tpath = dir.join(CIFAR_TEST_FILE);
            write(&tpath, &encode_cifar(test))?;
            written.extend([path, tpath]);
        }
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Zero padding before the random crop back to the original size.
    pub crop_pad: usize,
    /// Probability of a horizontal mirror.
    pub flip_prob: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            enabled: false,
            crop_pad: 0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self, kind: DatasetKind) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if kind == DatasetKind::Mnist && self.enabled && self.flip_prob > 0.0 {
            return Err(Error::Config(
                "horizontal flips are not allowed for MNIST digits".into(),
            ));
        }
        Ok(())
    }
}

/// One mini-batch: preprocessed images `(b, c, h, w)` and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

/// Seeded mini-batch stream over one epoch.
///
/// Training splits are shuffled with a generator keyed by `(seed, epoch)` and
/// augmented per [`AugmentConfig`]; test splits are visited in index order and
/// never augmented. Every sample appears exactly once per epoch; the final
/// batch may be short.
pub struct BatchStream<T> {
    data: Arc<Dataset>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: AugmentConfig,
    rng: ChaCha8Rng,
    _elem: std::marker::PhantomData<T>,
}

/// Generator for one `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Element> BatchStream<T> {
    pub fn new(data: Arc<Dataset>, batch_size: usize, augment: AugmentConfig, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        augment.validate(data.kind)?;
        let mut rng = rng_for(seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let augment = if data.split == Split::Train {
            order.shuffle(&mut rng);
            augment
        } else {
            AugmentConfig::none()
        };
        Ok(BatchStream {
            data,
            order,
            pos: 0,
            batch_size,
            augment,
            rng,
            _elem: std::marker::PhantomData,
        })
    }

    /// Index-order batches without shuffling or augmentation, whatever the split.
    pub fn ordered(data: Arc<Dataset>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(BatchStream {
            order: (0..data.len()).collect(),
            data,
            pos: 0,
            batch_size,
            augment: AugmentConfig::none(),
            rng: rng_for(0, 0),
            _elem: std::marker::PhantomData,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Moves batch assembly to a worker thread feeding a bounded queue of
    /// `capacity` batches. Batch contents and order are unchanged.
    pub fn prefetch(self, capacity: usize) -> Prefetch<T> {
        let (tx, rx) = mpsc::sync_channel(capacity.max(1));
        let handle = thread::spawn(move || {
            for batch in self {
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        Prefetch {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl<T: Element> Iterator for BatchStream<T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let [c, h, w] = self.data.shape();
        let sample = c * h * w;
        let mut buf = vec![T::zero(); indices.len() * sample];
        let aug = self.augment;
        for (k, &i) in indices.iter().enumerate() {
            let (pad, dy, dx, flip) = if aug.enabled {
                let dy = self.rng.random_range(0..=2 * aug.crop_pad);
                let dx = self.rng.random_range(0..=2 * aug.crop_pad);
                let flip = aug.flip_prob > 0.0 && self.rng.random_bool(aug.flip_prob);
                (aug.crop_pad, dy, dx, flip)
            } else {
                (0, 0, 0, false)
            };
            self.data
                .render(i, pad, dy, dx, flip, &mut buf[k * sample..(k + 1) * sample]);
        }
        let labels = indices.iter().map(|&i| self.data.labels[i] as usize).collect();
        Some(Batch {
            images: Tensor::new([indices.len(), c, h, w], buf).expect("consistent by construction"),
            labels,
            indices,
        })
    }
}

/// Batches produced on a background thread; see [`BatchStream::prefetch`].
pub struct Prefetch<T> {
    rx: Option<mpsc::Receiver<Batch<T>>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl<T> Iterator for Prefetch<T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl<T> Drop for Prefetch<T> {
    fn drop(&mut self) {
        // Closing the receiver unblocks a producer waiting on a full queue.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
