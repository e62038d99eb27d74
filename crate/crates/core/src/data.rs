//! IDX parsing, normalization, resizing, splitting, and batching.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::resize_bilinear;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Decoded contents of one IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxArray {
    Images { rows: usize, cols: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

impl IdxArray {
    pub fn len(&self) -> usize {
        match self {
            IdxArray::Images { rows, cols, pixels } => pixels.len() / (rows * cols).max(1),
            IdxArray::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            offset,
            msg: "truncated header".into(),
        })
}

/// Parse an uncompressed IDX byte stream (`ubyte` images or labels).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let magic = read_u32(bytes, 0)?;
    let (dims, header) = match magic {
        IMAGE_MAGIC => (3, 16),
        LABEL_MAGIC => (1, 8),
        other => {
            return Err(Error::Idx {
                offset: 0,
                msg: format!("unsupported magic 0x{other:08x}"),
            })
        }
    };
    let extents = (0..dims)
        .map(|d| read_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let expected: usize = extents.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::Idx {
            offset: header + payload.len(),
            msg: format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        });
    }
    if payload.len() > expected {
        return Err(Error::Idx {
            offset: header + expected,
            msg: format!("{} trailing bytes", payload.len() - expected),
        });
    }
    Ok(match magic {
        IMAGE_MAGIC => IdxArray::Images {
            rows: extents[1],
            cols: extents[2],
            pixels: payload.to_vec(),
        },
        _ => IdxArray::Labels(payload.to_vec()),
    })
}

/// Inverse of [`parse_idx`].
pub fn serialize_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::new();
    match array {
        IdxArray::Images { rows, cols, pixels } => {
            out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
            out.extend_from_slice(&(array.len() as u32).to_be_bytes());
            out.extend_from_slice(&(*rows as u32).to_be_bytes());
            out.extend_from_slice(&(*cols as u32).to_be_bytes());
            out.extend_from_slice(pixels);
        }
        IdxArray::Labels(labels) => {
            out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
    }
    out
}

/// Read an IDX file, transparently gunzipping when it starts with `1f 8b`.
pub fn read_idx_file(path: &Path) -> Result<IdxArray> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut decoded = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut decoded)
            .map_err(|e| Error::io(path, e))?;
        parse_idx(&decoded)
    } else {
        parse_idx(&raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dataset {
    Mnist,
    FashionMnist,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::FashionMnist => "fmnist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Some(Dataset::Mnist),
            "fmnist" | "fashion-mnist" | "fashionmnist" | "fashion_mnist" => Some(Dataset::FashionMnist),
            _ => None,
        }
    }

    /// Directory under the data root holding the four IDX files.
    pub fn dir_name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::FashionMnist => "fashion-mnist",
        }
    }

    pub fn norm(self) -> NormSpec {
        match self {
            Dataset::Mnist => NormSpec::MNIST,
            Dataset::FashionMnist => NormSpec::FASHION_MNIST,
        }
    }
}

/// Per-channel normalization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSpec {
    pub mean: f32,
    pub std: f32,
}

impl NormSpec {
    pub const MNIST: NormSpec = NormSpec {
        mean: 0.1307,
        std: 0.3081,
    };
    pub const FASHION_MNIST: NormSpec = NormSpec {
        mean: 0.2860,
        std: 0.3530,
    };

    pub fn new(mean: f32, std: f32) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::Invalid(format!("normalization std must be > 0, got {std}")));
        }
        Ok(NormSpec { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (mean, std) = (self.mean, self.std);
        x.map(|v| (v - mean) / std)
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let (mean, std) = (self.mean, self.std);
        x.map(|v| v * std + mean)
    }
}

/// Images `N×1×H×W` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.ndim() != 4 || images.dim(1) != 1 {
            return Err(Error::shape("dataset", format!("images must be N×1×H×W, got {:?}", images.shape())));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images vs {} labels", images.dim(0), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: NUM_CLASSES,
            });
        }
        Ok(LabeledDataset { images, labels, split })
    }

    /// Build from parsed image and label arrays; pixels map to [0, 1] by /255.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray, split: Split) -> Result<Self> {
        let (IdxArray::Images { rows, cols, pixels }, IdxArray::Labels(lbl)) = (images, labels) else {
            return Err(Error::Invalid("expected an image file and a label file".into()));
        };
        let n = images.len();
        let data = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
        let tensor = Tensor::new(vec![n, 1, *rows, *cols], data)?;
        Self::new(tensor, lbl.iter().map(|&l| usize::from(l)).collect(), split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.dim(2)
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize], split: Split) -> Self {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        LabeledDataset {
            images: Tensor::new(shape, data).expect("consistent subset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
        }
    }

    /// First `n` examples (or all when fewer).
    pub fn truncate(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx, self.split)
    }
}

fn idx_path(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (raw or .gz)"),
    ))
}

/// Load the official train (`train=true`) or test split of a dataset.
pub fn load_split(root: &Path, dataset: Dataset, train: bool) -> Result<LabeledDataset> {
    let dir = root.join(dataset.dir_name());
    let prefix = if train { "train" } else { "t10k" };
    let images = read_idx_file(&idx_path(&dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = read_idx_file(&idx_path(&dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    LabeledDataset::from_idx(&images, &labels, if train { Split::Train } else { Split::Test })
}

/// `(x − mean) / std` on every pixel.
pub fn normalize(ds: &LabeledDataset, spec: NormSpec) -> LabeledDataset {
    LabeledDataset {
        images: spec.apply(&ds.images),
        labels: ds.labels.clone(),
        split: ds.split,
    }
}

/// Bilinear resize of every image to `side × side`. Only 28 and 112 are used.
pub fn resize_dataset(ds: &LabeledDataset, side: usize) -> Result<LabeledDataset> {
    if side != 28 && side != 112 {
        return Err(Error::Invalid(format!("input side must be 28 or 112, got {side}")));
    }
    Ok(LabeledDataset {
        images: resize_images(&ds.images, side)?,
        labels: ds.labels.clone(),
        split: ds.split,
    })
}

pub(crate) fn resize_images(images: &Tensor, side: usize) -> Result<Tensor> {
    if images.dim(2) == side && images.dim(3) == side {
        return Ok(images.clone());
    }
    resize_bilinear(images, side, side)
}

/// Seeded shuffled split into `(train, val)`; `fraction` goes to train.
pub fn split_train_val(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ds.len() as f64 * fraction).round() as usize;
    let (train, val) = order.split_at(n_train);
    Ok((ds.select(train, Split::Train), ds.select(val, Split::Val)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Visit order for one epoch: identity, or a shuffle that depends only on
/// `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

/// Fixed-size batches covering the dataset exactly once; the last may be short.
pub fn make_batches(
    ds: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    let order = epoch_order(ds.len(), seed, epoch, shuffle);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let sub = ds.select(&idx, ds.split);
        Batch {
            images: sub.images,
            labels: sub.labels,
        }
    }))
}

/// A split of `n` synthetic images for smoke tests: class `c` is a bright
/// square whose position depends on `c`, plus seeded noise.
pub fn synthetic(n: usize, side: usize, seed: u64, split: Split) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = side * side;
    let block = (side / 4).max(1);
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % NUM_CLASSES;
        let (oy, ox) = ((c / 5) * (side / 2), (c % 5) * (side - block) / 4);
        for y in 0..side {
            for x in 0..side {
                let inside = y >= oy && y < oy + block && x >= ox && x < ox + block;
                let base = if inside { 0.9 } else { 0.05 };
                images.push((base + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    LabeledDataset::new(Tensor::new(vec![n, 1, side, side], images).unwrap(), labels, split).expect("labels are in range")
}
