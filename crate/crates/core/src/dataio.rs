//! Dataset decoding (IDX and CIFAR-10 binary batches), normalization, the
//! train/validation split, pairing maps for the dual model, k-fold
//! splitting, and batching.
//!
//! MNIST-family files are big-endian IDX (image magic `0x00000803`, label
//! magic `0x00000801`); grayscale images gain a channel axis to become
//! `[28, 28, 1]`. CIFAR-10 binary batches hold one label byte plus 3072
//! planar R/G/B pixel bytes per record. All pixels are scaled by 1/255.

use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Fashion,
    Cifar10,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Self::Mnist),
            "fashion" | "fashion-mnist" | "fashion_mnist" => Ok(Self::Fashion),
            "cifar10" | "cifar-10" => Ok(Self::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset {other}; expected mnist, fashion, or cifar10"
            ))),
        }
    }

    pub fn dir_name(&self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::Fashion => "fashion",
            Self::Cifar10 => "cifar10",
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Self::Mnist | Self::Fashion => vec![28, 28, 1],
            Self::Cifar10 => vec![32, 32, 3],
        }
    }

    /// Canonical train/validation sizes: the validation set is always the
    /// final 10,000 samples in file order.
    pub fn val_size(&self) -> usize {
        10_000
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// A loaded split: images in `[0, 1]`, one label per image.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: DatasetName,
    /// Flat sample-major pixel data; each sample is `shape` elements.
    images: Vec<f32>,
    shape: Vec<usize>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn from_parts(
        name: DatasetName,
        images: Vec<f32>,
        shape: Vec<usize>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixels for {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
            return Err(Error::Data(format!("label {bad} out of range [0, 10)")));
        }
        Ok(Self {
            name,
            images,
            shape,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Owned copy of one image.
    pub fn image(&self, i: usize) -> Tensor {
        let per: usize = self.shape.iter().product();
        Tensor::from_vec(&self.shape, self.images[i * per..(i + 1) * per].to_vec())
            .expect("stored sample is consistent")
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    /// New dataset holding the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let per: usize = self.shape.iter().product();
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Self {
            name: self.name,
            images,
            shape: self.shape.clone(),
            labels,
        }
    }

    /// First `n` samples in file order.
    pub fn head(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Concatenates two splits of the same dataset (used to recombine the
    /// training pool for k-fold).
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.shape != other.shape || self.name != other.name {
            return Err(Error::Data("cannot concat mismatched datasets".into()));
        }
        let mut images = self.images.clone();
        images.extend_from_slice(&other.images);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::from_parts(self.name, images, self.shape.clone(), labels)
    }
}

/// Train and test splits as shipped by the canonical files.
#[derive(Debug)]
pub struct DatasetPair {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_file_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Resolves `name` or `name.gz` under `dir`.
fn resolve(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Data(format!(
        "missing {name} (or {name}.gz) in {}; run fetch-data or point --data-dir at it",
        dir.display()
    )))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile {
            path: path.display().to_string(),
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Decodes an IDX image file into `[n, rows, cols]` bytes scaled to `[0, 1]`.
fn read_idx_images(path: &Path) -> Result<(Vec<f32>, usize, usize, usize)> {
    let bytes = read_file_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::TruncatedFile {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((pixels, n, rows, cols))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(Error::TruncatedFile {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..].to_vec())
}

fn load_idx_split(name: DatasetName, dir: &Path, prefix: &str) -> Result<Dataset> {
    let images_path = resolve(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels_path = resolve(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (pixels, n, rows, cols) = read_idx_images(&images_path)?;
    let labels = read_idx_labels(&labels_path)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} images but {} labels under {}",
            labels.len(),
            dir.display()
        )));
    }
    Dataset::from_parts(name, pixels, vec![rows, cols, 1], labels)
}

const CIFAR_RECORD: usize = 1 + 3 * 1024;

/// Decodes CIFAR-10 binary batch files: per record one label byte then three
/// 1024-byte color planes, repacked here as channels-last.
fn load_cifar_files(dir: &Path, files: &[&str]) -> Result<(Vec<f32>, Vec<u8>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let path = resolve(dir, file)?;
        let bytes = read_file_maybe_gz(&path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::TruncatedFile {
                path: path.display().to_string(),
                expected: (bytes.len() / CIFAR_RECORD + 1) * CIFAR_RECORD,
                found: bytes.len(),
            });
        }
        let n = bytes.len() / CIFAR_RECORD;
        pixels.reserve(n * 3072);
        labels.reserve(n);
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0]);
            let planes = &rec[1..];
            for pos in 0..1024 {
                for ch in 0..3 {
                    pixels.push(planes[ch * 1024 + pos] as f32 / 255.0);
                }
            }
        }
    }
    Ok((pixels, labels))
}

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILES: [&str; 1] = ["test_batch.bin"];

/// Loads the train and test splits of a dataset from `data_dir/<name>/`.
pub fn load_dataset(name: DatasetName, data_dir: &Path) -> Result<DatasetPair> {
    let dir = data_dir.join(name.dir_name());
    match name {
        DatasetName::Mnist | DatasetName::Fashion => Ok(DatasetPair {
            train: load_idx_split(name, &dir, "train")?,
            test: load_idx_split(name, &dir, "t10k")?,
        }),
        DatasetName::Cifar10 => {
            let (train_px, train_labels) = load_cifar_files(&dir, &CIFAR_TRAIN_FILES)?;
            let (test_px, test_labels) = load_cifar_files(&dir, &CIFAR_TEST_FILES)?;
            Ok(DatasetPair {
                train: Dataset::from_parts(name, train_px, vec![32, 32, 3], train_labels)?,
                test: Dataset::from_parts(name, test_px, vec![32, 32, 3], test_labels)?,
            })
        }
    }
}

/// Deterministic split: the final 10,000 samples in file order become the
/// validation set.
pub fn split_train_val(dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    split_tail(dataset, dataset.name.val_size())
}

/// Deterministic split with an explicit validation size taken from the tail
/// in file order.
pub fn split_tail(dataset: &Dataset, val: usize) -> Result<(Dataset, Dataset)> {
    if dataset.len() <= val {
        return Err(Error::Data(format!(
            "cannot take {val} validation samples from {}",
            dataset.len()
        )));
    }
    let n = dataset.len();
    let train: Vec<usize> = (0..n - val).collect();
    let valid: Vec<usize> = (n - val..n).collect();
    Ok((dataset.subset(&train), dataset.subset(&valid)))
}

/// One training pair for the dual model: `((x, second), (y, y))`.
#[derive(Clone)]
pub struct PairedBatch {
    pub inputs: (Vec<Tensor>, Vec<Tensor>),
    pub targets: (Vec<u8>, Vec<u8>),
}

/// Training pairing: the second input is a freshly augmented copy, drawn from
/// the per-epoch per-sample stream.
pub fn pair_train(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    scope: &str,
    epoch: usize,
    seed: u64,
) -> Result<PairedBatch> {
    let originals: Vec<Tensor> = indices.iter().map(|&i| dataset.image(i)).collect();
    let with_ids: Vec<(usize, Tensor)> = indices
        .iter()
        .zip(&originals)
        .map(|(&i, t)| (i, t.clone()))
        .collect();
    let augmented = augment::augment_batch(&with_ids, cfg, scope, epoch, seed)?;
    let labels: Vec<u8> = indices.iter().map(|&i| dataset.label(i)).collect();
    Ok(PairedBatch {
        inputs: (originals, augmented),
        targets: (labels.clone(), labels),
    })
}

/// Validation pairing: the second input is the original, bit for bit.
pub fn pair_val(dataset: &Dataset, indices: &[usize]) -> PairedBatch {
    let originals: Vec<Tensor> = indices.iter().map(|&i| dataset.image(i)).collect();
    let labels: Vec<u8> = indices.iter().map(|&i| dataset.label(i)).collect();
    PairedBatch {
        inputs: (originals.clone(), originals),
        targets: (labels.clone(), labels),
    }
}

/// One cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Deterministic shuffled partition into `k` near-equal folds; fold `i` uses
/// part `i` for validation and the rest for training.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot split {n} samples into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "kfold").shuffle(&mut order);

    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let val: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push(FoldSpec { fold, train, val });
        start += size;
    }
    Ok(folds)
}

/// Deterministic batch index sequence; the final partial batch is kept.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    shuffle: Option<&mut RngStream>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
