//! MNIST ingestion from IDX files (plain or gzip) and seeded batch sampling.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "t10k",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `[n, 1, 28, 28]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::arg(format!("{s:?} images vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= NUM_CLASSES) {
            return Err(Error::arg(format!("label {bad} out of range")));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_size(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Gathers the given sample indices into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let per = self.sample_size();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("sample index {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Batch::new(Tensor::new(shape, data)?, labels)
    }
}

/// Indices of a uniform sample without replacement, reproducible per seed.
pub fn sample_indices(n: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > n {
        return Err(Error::arg(format!("cannot sample {size} of {n} items")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, size).into_vec())
}

pub fn sample_batch(dataset: &LabeledDataset, size: usize, seed: u64) -> Result<Batch> {
    if size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let idx = sample_indices(dataset.len(), size, seed)?;
    dataset.gather(&idx)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1F, 0x8B]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path.display().to_string(), 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::format(&self.path, self.pos as u64, format!("truncated while reading {what}")))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn expect_magic(&mut self, magic: u32) -> Result<()> {
        let found = self.u32_be("magic number")?;
        if found != magic {
            return Err(Error::format(&self.path, 0, format!("magic {found:#010x}, expected {magic:#010x}")));
        }
        Ok(())
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < len {
            return Err(Error::format(
                &self.path,
                self.bytes.len() as u64,
                format!("truncated payload: need {len} bytes, have {avail}"),
            ));
        }
        if avail > len {
            return Err(Error::format(
                &self.path,
                (self.pos + len) as u64,
                format!("{} trailing bytes after payload", avail - len),
            ));
        }
        Ok(&self.bytes[self.pos..])
    }
}

/// Raw IDX image file parse: returns `[n, 1, rows, cols]` scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<Tensor> {
    let mut c = Cursor { bytes, pos: 0, path: path.to_string() };
    c.expect_magic(IDX_IMAGES_MAGIC)?;
    let n = c.u32_be("image count")? as usize;
    let rows = c.u32_be("row count")? as usize;
    let cols = c.u32_be("column count")? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::format(path, 8, format!("image dims {rows}x{cols}, expected 28x28")));
    }
    if n == 0 {
        return Err(Error::format(path, 4, "zero images"));
    }
    let px = c.payload(n * rows * cols)?;
    let data = px.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0, path: path.to_string() };
    c.expect_magic(IDX_LABELS_MAGIC)?;
    let n = c.u32_be("label count")? as usize;
    let labels = c.payload(n)?.to_vec();
    if let Some(pos) = labels.iter().position(|&y| y as usize >= NUM_CLASSES) {
        return Err(Error::format(path, (8 + pos) as u64, format!("label {} out of range", labels[pos])));
    }
    Ok(labels)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    parse_idx_images(&read_maybe_gz(path)?, &path.display().to_string())
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&read_maybe_gz(path)?, &path.display().to_string())
}

/// Finds `<stem>-<kind>-idx?-ubyte`, also accepting the `.idx?-ubyte` spelling and a `.gz` suffix.
fn find_idx(dir: &Path, stem: &str, kind: &str, dims: u8) -> Result<PathBuf> {
    let names = [
        format!("{stem}-{kind}-idx{dims}-ubyte"),
        format!("{stem}-{kind}.idx{dims}-ubyte"),
    ];
    for name in &names {
        for suffix in ["", ".gz"] {
            let p = dir.join(format!("{name}{suffix}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::io(
        dir.join(&names[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

/// Loads one MNIST split from a directory holding the standard four files.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let stem = split.file_stem();
    let images = load_idx_images(find_idx(dir, stem, "images", 3)?)?;
    let labels = load_idx_labels(find_idx(dir, stem, "labels", 1)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            dir.display().to_string(),
            4,
            format!("{} images but {} labels", images.shape()[0], labels.len()),
        ));
    }
    LabeledDataset::new(images, labels, split)
}
