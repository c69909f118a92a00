//! Datasets: the synthetic bar-orientation task, IDX and CIFAR binary
//! loaders, and deterministic shuffled batching.
//!
//! Pixels are `f32` in `[0, 1]` everywhere (raw scaling, no mean/std
//! normalization). Images are NCHW. The synthetic generator quantizes
//! pixels to the 8-bit grid so that a write-to-IDX round trip is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::Extent;
use crate::digest::Fnv64;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Conventional file names used by `gen-data` output and the IDX source.
pub const TRAIN_IMAGES_FILE: &str = "train-images.idx";
pub const TRAIN_LABELS_FILE: &str = "train-labels.idx";
pub const TEST_IMAGES_FILE: &str = "test-images.idx";
pub const TEST_LABELS_FILE: &str = "test-labels.idx";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_LEN: usize = 3073;

/// A labelled image set held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// NCHW pixel data in `[0, 1]`.
    pub images: Array4<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

/// Train and test splits produced by one `DatasetSpec`.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Where a dataset comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
    CifarBinary,
}

/// Everything needed to materialize a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Generator seed for the synthetic source. Independent of the training
    /// seed so one fixed dataset can be reused across seeds and strategies.
    pub seed: u64,
    /// Scales every per-sample perturbation of the synthetic source
    /// (orientation, position, thickness, brightness, pixel noise).
    /// 0.0 renders each class's canonical bar exactly.
    pub jitter: f64,
    /// Directory holding the four IDX files for `DataSource::Idx`.
    pub dir: Option<PathBuf>,
    /// Training batch files for `DataSource::CifarBinary`.
    pub cifar_train: Vec<PathBuf>,
    /// Test batch files for `DataSource::CifarBinary`.
    pub cifar_test: Vec<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::Synthetic,
            classes: 3,
            height: 16,
            width: 16,
            train_count: 2000,
            test_count: 500,
            seed: 123,
            jitter: 1.0,
            dir: None,
            cifar_train: Vec::new(),
            cifar_test: Vec::new(),
        }
    }
}

impl Dataset {
    pub fn new(images: Array4<f32>, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let d = Dataset {
            images,
            labels,
            num_classes,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self) -> Extent {
        Extent {
            height: self.images.shape()[2],
            width: self.images.shape()[3],
        }
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Domain(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.len() == 0 {
            return Err(Error::Domain("dataset has no samples".into()));
        }
        if self.labels.len() != self.len() {
            return Err(Error::Domain(format!(
                "{} images but {} labels",
                self.len(),
                self.labels.len()
            )));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.num_classes)
        {
            return Err(Error::Domain(format!(
                "label {l} at index {i} exceeds num_classes {}",
                self.num_classes
            )));
        }
        if let Some(p) = self
            .images
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::Domain(format!("pixel {p} outside [0, 1]")));
        }
        Ok(())
    }

    /// Content checksum over shape, pixels and labels.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update_u64(self.num_classes as u64);
        for &d in self.images.shape() {
            h.update_u64(d as u64);
        }
        for p in self.images.iter() {
            h.update(&p.to_le_bytes());
        }
        for &l in &self.labels {
            h.update(&l.to_le_bytes());
        }
        h.finish()
    }
}

/// One batch of images plus labels, cut from a dataset or produced by the
/// augmentation pipeline.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    /// NCHW pixel data in `[0, 1]`.
    pub data: Array4<f32>,
    pub labels: Vec<u32>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>, labels: Vec<u32>) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(Error::Domain("batch must hold at least one image".into()));
        }
        if data.shape()[0] != labels.len() {
            return Err(Error::Domain(format!(
                "{} images but {} labels in batch",
                data.shape()[0],
                labels.len()
            )));
        }
        if let Some(p) = data.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Domain(format!("pixel {p} outside [0, 1]")));
        }
        Ok(ImageBatch { data, labels })
    }

    /// Construct without scanning pixels; for internal paths whose inputs
    /// already satisfy the invariants.
    pub(crate) fn from_parts(data: Array4<f32>, labels: Vec<u32>) -> Self {
        debug_assert_eq!(data.shape()[0], labels.len());
        ImageBatch { data, labels }
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self) -> Extent {
        Extent {
            height: self.data.shape()[2],
            width: self.data.shape()[3],
        }
    }
}

/// Materialize the dataset a spec describes.
pub fn load_dataset(spec: &DatasetSpec) -> Result<SplitDataset> {
    match spec.source {
        DataSource::Synthetic => gen_synthetic(spec),
        DataSource::Idx => {
            let dir = spec.dir.as_ref().ok_or_else(|| {
                Error::Config("data.dir is required when data.source=idx".into())
            })?;
            let train = load_idx(
                &dir.join(TRAIN_IMAGES_FILE),
                &dir.join(TRAIN_LABELS_FILE),
                spec.classes,
            )?;
            let test = load_idx(
                &dir.join(TEST_IMAGES_FILE),
                &dir.join(TEST_LABELS_FILE),
                spec.classes,
            )?;
            Ok(SplitDataset { train, test })
        }
        DataSource::CifarBinary => {
            if spec.cifar_train.is_empty() || spec.cifar_test.is_empty() {
                return Err(Error::Config(
                    "data.cifar_train and data.cifar_test are required when data.source=cifar"
                        .into(),
                ));
            }
            let train = load_cifar_binary(&spec.cifar_train, spec.classes)?;
            let test = load_cifar_binary(&spec.cifar_test, spec.classes)?;
            Ok(SplitDataset { train, test })
        }
    }
}

/// Generate the synthetic bar-orientation task.
///
/// Class `k` is an anti-aliased bar through the image center at
/// `180k/classes` degrees. Per-sample jitter perturbs orientation by up to
/// ±10 degrees and position by up to ±2 pixels, varies thickness and
/// brightness, and adds clamped Gaussian pixel noise with σ = 0.05. Class
/// labels cycle `i mod classes`, so per-class counts are balanced within 1.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<SplitDataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!(
            "synthetic source needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.height < 4 || spec.width < 4 {
        return Err(Error::Config(format!(
            "synthetic images must be at least 4x4, got {}x{}",
            spec.height, spec.width
        )));
    }
    if spec.train_count == 0 || spec.test_count == 0 {
        return Err(Error::Config("train and test counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.jitter) {
        return Err(Error::Config(format!(
            "data.jitter must lie in [0, 1], got {}",
            spec.jitter
        )));
    }

    let (h, w) = (spec.height, spec.width);
    let total = spec.train_count + spec.test_count;
    let mut rng = substream(spec.seed, "synthetic", &[]);
    let noise = Normal::new(0.0f64, 0.05).expect("valid sigma");

    let mut images = Array4::<f32>::zeros((total, 1, h, w));
    let mut labels = Vec::with_capacity(total);
    let (cx0, cy0) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    for i in 0..total {
        let class = i % spec.classes;
        labels.push(class as u32);

        // Fixed draw order per sample keeps the stream layout stable.
        let angle_jit: f64 = rng.gen_range(-10.0..=10.0) * spec.jitter;
        let dx: f64 = rng.gen_range(-2.0..=2.0) * spec.jitter;
        let dy: f64 = rng.gen_range(-2.0..=2.0) * spec.jitter;
        let thickness: f64 = 2.0 + rng.gen_range(-0.8..=0.8) * spec.jitter;
        let brightness: f64 = 1.0 - rng.gen_range(0.0..=0.35) * spec.jitter;

        let theta = (180.0 * class as f64 / spec.classes as f64 + angle_jit).to_radians();
        let (sin_t, cos_t) = theta.sin_cos();
        let (cx, cy) = (cx0 + dx, cy0 + dy);

        for y in 0..h {
            for x in 0..w {
                // Distance from the pixel center to the bar axis.
                let d = (-sin_t * (x as f64 - cx) + cos_t * (y as f64 - cy)).abs();
                // 1-pixel soft edge for anti-aliasing.
                let cover = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                let mut v = brightness * cover;
                v += noise.sample(&mut rng) * spec.jitter;
                // Quantize to the 8-bit grid exactly as the IDX loader will
                // reproduce it: byte k maps back to k/255 in f32.
                let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                images[(i, 0, y, x)] = byte as f32 / 255.0;
            }
        }
    }

    let train_images = images
        .slice(ndarray::s![..spec.train_count, .., .., ..])
        .to_owned();
    let test_images = images
        .slice(ndarray::s![spec.train_count.., .., .., ..])
        .to_owned();
    let train = Dataset::new(
        train_images,
        labels[..spec.train_count].to_vec(),
        spec.classes,
    )?;
    let test = Dataset::new(test_images, labels[spec.train_count..].to_vec(), spec.classes)?;
    Ok(SplitDataset { train, test })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: bytes.len() as u64,
            detail: format!("expected {end} header bytes, file has {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an IDX image/label file pair (big-endian, MNIST layout).
///
/// Image files carry magic `0x00000803` and dimensions `N x rows x cols`;
/// label files carry magic `0x00000801` and `N`. Pixel bytes scale to
/// `byte / 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let magic = read_be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            offset: 0,
            detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = read_be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = read_be_u32(&img_bytes, 12, images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            offset: img_bytes.len().min(expected) as u64,
            detail: format!(
                "{n} images of {rows}x{cols} need {expected} bytes, file has {}",
                img_bytes.len()
            ),
        });
    }

    let lbl_bytes = read_file(labels_path)?;
    let magic = read_be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 0,
            detail: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = read_be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: lbl_bytes.len().min(8 + n_labels) as u64,
            detail: format!(
                "{n_labels} labels need {} bytes, file has {}",
                8 + n_labels,
                lbl_bytes.len()
            ),
        });
    }
    if n_labels != n {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 4,
            detail: format!("{n} images but {n_labels} labels"),
        });
    }

    let mut images = Array4::<f32>::zeros((n, 1, rows, cols));
    {
        let flat = images.as_slice_mut().expect("standard layout");
        for (dst, &src) in flat.iter_mut().zip(&img_bytes[16..]) {
            *dst = src as f32 / 255.0;
        }
    }
    let labels: Vec<u32> = lbl_bytes[8..].iter().map(|&b| u32::from(b)).collect();
    Dataset::new(images, labels, classes)
}

/// Write a dataset as an IDX image/label file pair.
///
/// Pixels are stored as `round(p * 255)`; loading the pair back reproduces
/// any dataset whose pixels already sit on the 8-bit grid bit-exactly.
pub fn write_idx(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (n, c, h, w) = {
        let s = d.images.shape();
        (s[0], s[1], s[2], s[3])
    };
    if c != 1 {
        return Err(Error::Domain(format!(
            "IDX output supports single-channel images, got {c} channels"
        )));
    }
    let mut img_bytes = Vec::with_capacity(16 + n * h * w);
    img_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(h as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(w as u32).to_be_bytes());
    for p in d.images.iter() {
        img_bytes.push((p * 255.0).round() as u8);
    }

    let mut lbl_bytes = Vec::with_capacity(8 + n);
    lbl_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &d.labels {
        lbl_bytes.push(l as u8);
    }

    crate::report::write_atomic(images_path, &img_bytes)?;
    crate::report::write_atomic(labels_path, &lbl_bytes)?;
    Ok(())
}

/// Load CIFAR-10 style binary batch files.
///
/// Each record is 3073 bytes: one label byte then three 1024-byte channel
/// planes of a 32x32 image. A file whose length is not a multiple of 3073
/// is rejected.
pub fn load_cifar_binary(paths: &[PathBuf], classes: usize) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR batch files given".into()));
    }
    let mut records: Vec<(u8, Vec<u8>)> = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD_LEN) as u64,
                detail: format!(
                    "file length {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record",
                    bytes.len()
                ),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            records.push((rec[0], rec[1..].to_vec()));
        }
    }

    let n = records.len();
    let mut images = Array4::<f32>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    for (i, (label, pixels)) in records.iter().enumerate() {
        labels.push(u32::from(*label));
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    images[(i, ch, y, x)] = pixels[ch * 1024 + y * 32 + x] as f32 / 255.0;
                }
            }
        }
    }
    Dataset::new(images, labels, classes)
}

/// Deterministic shuffled batches for one epoch.
///
/// The permutation is a Fisher-Yates shuffle drawn from the substream
/// `(shuffle_seed, "epoch-permutation", epoch)`; the final short batch is
/// kept. Batch count is `ceil(len / batch_size)`.
pub fn batches(
    d: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    let mut rng = substream(shuffle_seed, "epoch-permutation", &[epoch]);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    Ok(BatchIter {
        dataset: d,
        order,
        batch_size,
        next: 0,
    })
}

/// Iterator over one epoch's batches.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl BatchIter<'_> {
    /// The shuffled sample order this iterator walks.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Number of batches the epoch yields.
    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = &self.order[self.next..end];
        self.next = end;

        let s = self.dataset.images.shape();
        let mut data = Array4::<f32>::zeros((idx.len(), s[1], s[2], s[3]));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            let src: ArrayView3<f32> = self.dataset.images.index_axis(ndarray::Axis(0), i);
            data.index_axis_mut(ndarray::Axis(0), row).assign(&src);
            labels.push(self.dataset.labels[i]);
        }
        Some(ImageBatch::from_parts(data, labels))
    }
}
