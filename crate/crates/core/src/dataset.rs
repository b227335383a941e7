//! MNIST-family datasets read from IDX files and encoded as optical input powers.
//!
//! Pixels are kept as bytes and encoded on demand as `byte / 255 * input_scale`,
//! so inputs are never negative.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const N_CLASSES: usize = 10;
/// Default power of a full-intensity pixel, in units of the SOA saturation
/// power scale.
pub const DEFAULT_INPUT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    FashionMnist,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
        }
    }

    /// Directory under the data root holding this dataset's IDX files.
    pub fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "",
            DatasetKind::FashionMnist => "fashion-mnist",
        }
    }
}

/// Which files to read and how to cut them into train and test subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// `None` keeps every available training sample.
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub subset_seed: u64,
    pub input_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            train_size: Some(2000),
            test_size: Some(1000),
            subset_seed: 0,
            input_scale: DEFAULT_INPUT_SCALE,
        }
    }
}

/// IDX files found under a data root.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Separate train and test files (`train-*` and `t10k-*`).
    Split {
        train: (PathBuf, PathBuf),
        test: (PathBuf, PathBuf),
    },
    /// One pool that train and test subsets are drawn from disjointly.
    Pooled { pool: (PathBuf, PathBuf) },
}

fn find_pair(dir: &Path, stem: &str) -> Option<(PathBuf, PathBuf)> {
    ["", ".gz"].iter().find_map(|ext| {
        let images = dir.join(format!("{stem}-images-idx3-ubyte{ext}"));
        let labels = dir.join(format!("{stem}-labels-idx1-ubyte{ext}"));
        (images.is_file() && labels.is_file()).then_some((images, labels))
    })
}

/// Locates the IDX files of `kind` under `root`.
pub fn locate(root: &Path, kind: DatasetKind) -> Result<DataSource> {
    let dir = root.join(kind.subdir());
    if let (Some(train), Some(test)) = (find_pair(&dir, "train"), find_pair(&dir, "t10k")) {
        return Ok(DataSource::Split { train, test });
    }
    for stem in ["mnist-10k", "pool"] {
        if let Some(pool) = find_pair(&dir, stem) {
            if kind == DatasetKind::Mnist || stem == "pool" {
                return Ok(DataSource::Pooled { pool });
            }
        }
    }
    Err(DataError::Open {
        path: dir,
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no IDX image/label files found"),
    }
    .into())
}

/// Loads the train and test subsets described by `config` from `root`.
pub fn load_subsets(root: &Path, config: &DataConfig) -> Result<(Dataset, Dataset)> {
    if config.train_size == Some(0) || config.test_size == Some(0) {
        return Err(Error::InvalidConfig("train_size and test_size must be at least 1".into()));
    }
    let (train, test) = match locate(root, config.dataset)? {
        DataSource::Split { train, test } => {
            let train = load_idx(&train.0, &train.1)?;
            let test = load_idx(&test.0, &test.1)?;
            let train = match config.train_size {
                Some(k) => subsample(&train, k, config.subset_seed)?,
                None => train,
            };
            let test = match config.test_size {
                Some(k) => subsample(&test, k, config.subset_seed ^ 1)?,
                None => test,
            };
            (train, test)
        }
        DataSource::Pooled { pool } => {
            let pool = load_idx(&pool.0, &pool.1)?;
            let test_size = config.test_size.unwrap_or(pool.len() / 5);
            let train_size = config.train_size.unwrap_or(pool.len().saturating_sub(test_size));
            let mut parts = partition(&pool, &[train_size, test_size], config.subset_seed)?;
            let test = parts.pop().unwrap();
            (parts.pop().unwrap(), test)
        }
    };
    Ok((
        train.with_input_scale(config.input_scale)?.with_split(Split::Train),
        test.with_input_scale(config.input_scale)?.with_split(Split::Test),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: u8,
    pub expected: [f64; N_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    dim: usize,
    input_scale: f64,
    split: Split,
}

pub fn one_hot(label: u8) -> [f64; N_CLASSES] {
    let mut e = [0.0; N_CLASSES];
    e[label as usize] = 1.0;
    e
}

/// Inverse of [`one_hot`]: index of the largest entry.
pub fn decode_label(expected: &[f64]) -> u8 {
    crate::training::argmax(expected) as u8
}

impl Dataset {
    /// `pixels` holds `labels.len()` images of `dim` bytes each, row-major.
    pub fn from_raw(pixels: Vec<u8>, labels: Vec<u8>, dim: usize) -> Result<Self> {
        if dim == 0 || pixels.len() != labels.len() * dim {
            return Err(DataError::CountMismatch {
                images: if dim == 0 { 0 } else { pixels.len() / dim },
                labels: labels.len(),
            }
            .into());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(DataError::BadLabel(bad).into());
        }
        Ok(Self {
            pixels,
            labels,
            dim,
            input_scale: 1.0,
            split: Split::Train,
        })
    }

    /// Sets the power that a full-intensity pixel encodes to.
    pub fn with_input_scale(mut self, input_scale: f64) -> Result<Self> {
        if !(input_scale > 0.0) || !input_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "input_scale must be positive, got {input_scale}"
            )));
        }
        self.input_scale = input_scale;
        Ok(self)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.dim..(i + 1) * self.dim]
    }

    pub fn expected(&self, i: usize) -> [f64; N_CLASSES] {
        one_hot(self.labels[i])
    }

    /// Writes the encoded input powers of sample `i` into `out`.
    pub fn encode_into(&self, i: usize, out: &mut [f64]) {
        let k = self.input_scale / 255.0;
        for (o, &p) in out.iter_mut().zip(self.raw_image(i)) {
            *o = p as f64 * k;
        }
    }

    pub fn sample(&self, i: usize) -> Sample {
        let mut input = vec![0.0; self.dim];
        self.encode_into(i, &mut input);
        Sample {
            input,
            label: self.labels[i],
            expected: self.expected(i),
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0; N_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Mean encoded input power over all samples and pixels.
    pub fn mean_input_power(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        let total: u64 = self.pixels.iter().map(|&p| p as u64).sum();
        total as f64 / self.pixels.len() as f64 / 255.0 * self.input_scale
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.raw_image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            pixels,
            labels,
            dim: self.dim,
            input_scale: self.input_scale,
            split: self.split,
        }
    }
}

/// Seeded uniform sample of `k` items without replacement.
pub fn subsample(data: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    Ok(partition(data, &[k], seed)?.pop().unwrap())
}

/// Disjoint seeded subsets of the given sizes, drawn from one shuffle.
pub fn partition(data: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<Dataset>> {
    let total: usize = sizes.iter().sum();
    if sizes.contains(&0) || total > data.len() {
        return Err(DataError::OutOfRange {
            requested: total,
            available: data.len(),
        }
        .into());
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&k| {
            let part = data.select(&order[start..start + k]);
            start += k;
            part
        })
        .collect())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let open_err = |source| DataError::Open {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(open_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(open_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], path: &Path, words: usize) -> Result<Vec<u32>> {
    if bytes.len() < words * 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: words * 4,
            found: bytes.len(),
        }
        .into());
    }
    Ok(bytes[..words * 4]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_magic(path: &Path, expected: u32, found: u32) -> Result<()> {
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

/// Reads an IDX image/label pair (plain or gzip-compressed).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_maybe_gz(images_path)?;
    check_magic(images_path, IMAGES_MAGIC, header(&images, images_path, 1)?[0])?;
    let h = header(&images, images_path, 4)?;
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let dim = rows * cols;
    let payload = &images[16..];
    if payload.len() < count * dim {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            expected: count * dim,
            found: payload.len(),
        }
        .into());
    }

    let labels = read_maybe_gz(labels_path)?;
    check_magic(labels_path, LABELS_MAGIC, header(&labels, labels_path, 1)?[0])?;
    let h = header(&labels, labels_path, 2)?;
    let n_labels = h[1] as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            expected: n_labels,
            found: label_bytes.len(),
        }
        .into());
    }
    if n_labels != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: n_labels,
        }
        .into());
    }
    Dataset::from_raw(payload[..count * dim].to_vec(), label_bytes[..count].to_vec(), dim)
}

/// Writes `data` as an IDX pair with square `side x side` images.
/// Files ending in `.gz` are gzip-compressed.
pub fn write_idx(data: &Dataset, side: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if side * side != data.dim {
        return Err(Error::mismatch("image side squared", data.dim, side * side));
    }
    let mut images = Vec::with_capacity(16 + data.pixels.len());
    for word in [IMAGES_MAGIC, data.len() as u32, side as u32, side as u32] {
        images.extend_from_slice(&word.to_be_bytes());
    }
    images.extend_from_slice(&data.pixels);
    let mut labels = Vec::with_capacity(8 + data.len());
    for word in [LABELS_MAGIC, data.len() as u32] {
        labels.extend_from_slice(&word.to_be_bytes());
    }
    labels.extend_from_slice(&data.labels);
    write_maybe_gz(images_path, &images)?;
    write_maybe_gz(labels_path, &labels)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let out = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let dim = 4;
        let pixels = (0..n * dim).map(|i| (i * 37 % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::from_raw(pixels, labels, dim).unwrap()
    }

    #[test]
    fn encoding_and_one_hot() {
        let data = Dataset::from_raw(vec![0, 0, 0, 0, 255, 51, 0, 0], vec![3, 7], 4)
            .unwrap()
            .with_input_scale(0.5)
            .unwrap();
        assert_eq!(data.sample(0).input, vec![0.0; 4]);
        let s = data.sample(1);
        assert_eq!(s.input, vec![0.5, 0.1, 0.0, 0.0]);
        assert_eq!(s.expected[7], 1.0);
        assert_eq!(s.expected.iter().sum::<f64>(), 1.0);
        for label in 0..10u8 {
            assert_eq!(decode_label(&one_hot(label)), label);
        }
    }

    #[test]
    fn raw_validation() {
        assert!(Dataset::from_raw(vec![0; 7], vec![0, 1], 4).is_err());
        assert!(matches!(
            Dataset::from_raw(vec![0; 4], vec![10], 4),
            Err(Error::Data(DataError::BadLabel(10)))
        ));
        assert!(toy(3).with_input_scale(0.0).is_err());
    }

    #[test]
    fn idx_round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy(25);
        for ext in ["", ".gz"] {
            let img = dir.path().join(format!("img{ext}"));
            let lab = dir.path().join(format!("lab{ext}"));
            write_idx(&data, 2, &img, &lab).unwrap();
            assert_eq!(load_idx(&img, &lab).unwrap(), data);
        }
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx(&toy(5), 2, &img, &lab).unwrap();

        let missing = dir.path().join("nope");
        assert!(matches!(load_idx(&missing, &lab), Err(Error::Data(DataError::Open { .. }))));
        assert!(matches!(
            load_idx(&lab, &lab),
            Err(Error::Data(DataError::BadMagic { expected: IMAGES_MAGIC, .. }))
        ));

        let bytes = fs::read(&img).unwrap();
        let cut = dir.path().join("cut");
        fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&cut, &lab), Err(Error::Data(DataError::Truncated { .. }))));
        fs::write(&cut, &bytes[..10]).unwrap();
        assert!(matches!(load_idx(&cut, &lab), Err(Error::Data(DataError::Truncated { .. }))));

        let img6 = dir.path().join("img6");
        let lab6 = dir.path().join("lab6");
        write_idx(&toy(6), 2, &img6, &lab6).unwrap();
        assert!(matches!(
            load_idx(&img, &lab6),
            Err(Error::Data(DataError::CountMismatch { images: 5, labels: 6 }))
        ));
    }

    #[test]
    fn subsample_contracts() {
        let data = toy(50);
        let a = subsample(&data, 20, 9).unwrap();
        assert_eq!(a, subsample(&data, 20, 9).unwrap());
        assert_ne!(a, subsample(&data, 20, 10).unwrap());
        assert_eq!(a.len(), 20);

        let all = subsample(&data, 50, 1).unwrap();
        let mut got: Vec<&[u8]> = (0..50).map(|i| all.raw_image(i)).collect();
        let mut want: Vec<&[u8]> = (0..50).map(|i| data.raw_image(i)).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);

        assert!(subsample(&data, 0, 1).is_err());
        assert!(subsample(&data, 51, 1).is_err());
    }

    #[test]
    fn locate_and_load_subsets() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            locate(dir.path(), DatasetKind::Mnist),
            Err(Error::Data(DataError::Open { .. }))
        ));
        let data = toy(60);
        write_idx(
            &data,
            2,
            &dir.path().join("mnist-10k-images-idx3-ubyte.gz"),
            &dir.path().join("mnist-10k-labels-idx1-ubyte.gz"),
        )
        .unwrap();
        assert!(matches!(locate(dir.path(), DatasetKind::Mnist).unwrap(), DataSource::Pooled { .. }));
        assert!(locate(dir.path(), DatasetKind::FashionMnist).is_err());

        let config = DataConfig {
            train_size: Some(40),
            test_size: Some(20),
            input_scale: 0.5,
            ..DataConfig::default()
        };
        let (train, test) = load_subsets(dir.path(), &config).unwrap();
        assert_eq!((train.len(), test.len()), (40, 20));
        assert_eq!((train.split(), test.split()), (Split::Train, Split::Test));
        assert_eq!(train.input_scale(), 0.5);
        let too_big = DataConfig {
            train_size: Some(50),
            ..config.clone()
        };
        assert!(load_subsets(dir.path(), &too_big).is_err());

        write_idx(&data, 2, &dir.path().join("train-images-idx3-ubyte"), &dir.path().join("train-labels-idx1-ubyte"))
            .unwrap();
        write_idx(&toy(30), 2, &dir.path().join("t10k-images-idx3-ubyte"), &dir.path().join("t10k-labels-idx1-ubyte"))
            .unwrap();
        assert!(matches!(locate(dir.path(), DatasetKind::Mnist).unwrap(), DataSource::Split { .. }));
        let (train, test) = load_subsets(dir.path(), &config).unwrap();
        assert_eq!((train.len(), test.len()), (40, 20));
    }

    #[test]
    fn partition_is_disjoint() {
        let data = Dataset::from_raw((0..40u8).collect(), (0..40).map(|i| i % 10).collect(), 1).unwrap();
        let parts = partition(&data, &[25, 15], 3).unwrap();
        let mut seen: Vec<u8> = parts.iter().flat_map(|p| p.pixels.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..40u8).collect::<Vec<_>>());
        assert!(partition(&data, &[30, 15], 3).is_err());
    }
}
