//! IDX-format dataset ingestion, normalization, and subset selection.
//!
//! The loader accepts the standard big-endian IDX containers (magic 2051
//! for images, 2049 for labels), optionally gzip-compressed (detected by
//! the 0x1f8b magic bytes). Pixels are normalized from 0..=255 bytes to
//! floats in [-0.5, 0.5] at load time.

use crate::autograd::Tensor;
use crate::{derive_seed, Error, Result};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::Read;
use std::path::Path;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// An immutable set of normalized images with labels in `0..classes`.
#[derive(Clone)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<u8>, classes: usize) -> Result<Dataset> {
        if images.len() != labels.len() {
            return Err(Error::Load(format!(
                "image count {} does not match label count {}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize >= classes) {
            return Err(Error::Load(format!(
                "label {bad} outside 0..{classes}"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: usize) -> &Tensor {
        &self.images[index]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }
}

/// `v / 255 - 0.5`: maps byte 0 to -0.5 and byte 255 to +0.5.
pub fn normalize(byte: u8) -> f64 {
    byte as f64 / 255.0 - 0.5
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut decoded = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut decoded)
            .map_err(|e| Error::Load(format!("gzip decode of {} failed: {e}", path.display())))?;
        Ok(decoded)
    } else {
        Ok(raw)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Load(format!(
            "file truncated while reading {what}: need {end} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX image container into normalized `[1, rows, cols]` tensors.
pub fn parse_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = read_u32_be(bytes, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Load(format!(
            "image magic {magic} != {IMAGE_MAGIC}"
        )));
    }
    let count = read_u32_be(bytes, 4, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, "image rows")? as usize;
    let cols = read_u32_be(bytes, 12, "image cols")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Load(format!(
            "image payload is {} bytes, expected {expected} (16 + {count}*{rows}*{cols})",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(count);
    for k in 0..count {
        let start = 16 + k * rows * cols;
        let data = bytes[start..start + rows * cols]
            .iter()
            .map(|b| normalize(*b))
            .collect();
        images.push(Tensor::new(vec![1, rows, cols], data)?);
    }
    Ok(images)
}

/// Parses an IDX label container.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Load(format!(
            "label magic {magic} != {LABEL_MAGIC}"
        )));
    }
    let count = read_u32_be(bytes, 4, "label count")? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Load(format!(
            "label payload is {} bytes, expected {expected} (8 + {count})",
            bytes.len()
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads a paired image/label IDX file set (plain or gzipped).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_labels(&read_maybe_gz(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Load(format!(
            "image count {} != label count {} ({} vs {})",
            images.len(),
            labels.len(),
            images_path.display(),
            labels_path.display()
        )));
    }
    Dataset::new(images, labels, 10)
}

/// Class-balanced, seed-deterministic selection of `per_class` samples per
/// label, shuffled once.
pub fn subset(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for i in 0..dataset.len() {
        by_class[dataset.label(i)].push(i);
    }
    let mut picked = Vec::with_capacity(per_class * dataset.classes);
    for (class, indices) in by_class.iter_mut().enumerate() {
        if indices.len() < per_class {
            return Err(Error::Config(format!(
                "class {class} has only {} samples, need {per_class}",
                indices.len()
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &[0x5b5e7, class as u64]));
        indices.shuffle(&mut rng);
        picked.extend_from_slice(&indices[..per_class]);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &[0x5b5e7, u64::MAX]));
    picked.shuffle(&mut rng);
    let images = picked.iter().map(|&i| dataset.image(i).clone()).collect();
    let labels = picked.iter().map(|&i| dataset.labels[i]).collect();
    Dataset::new(images, labels, dataset.classes)
}

/// Deterministic permutation of `0..len`.
pub fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices
}
