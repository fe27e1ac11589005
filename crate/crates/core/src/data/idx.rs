//! IDX (MNIST-family) file reader and writer.
//!
//! Images: magic `0x00000803`, then big-endian `u32` count, rows, cols, then
//! `count * rows * cols` unsigned bytes. Labels: magic `0x00000801`, count,
//! then `count` bytes.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::Dataset;
use crate::nn::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, needs {needed} bytes but has {available}")]
    Truncated {
        path: String,
        needed: usize,
        available: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn read_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            path: path.to_string(),
            needed: at + 4,
            available: bytes.len(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_magic(bytes: &[u8], expected: u32, path: &str) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Raw image bytes with `(count, rows, cols)`.
pub fn parse_images(bytes: &[u8], path: &str) -> Result<(Vec<u8>, usize, usize, usize), IdxError> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            path: path.to_string(),
            needed,
            available: bytes.len(),
        });
    }
    Ok((bytes[16..needed].to_vec(), n, rows, cols))
}

pub fn parse_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let n = read_u32(bytes, 4, path)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            path: path.to_string(),
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn encode_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<(), IdxError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| IdxError::Io { path, source }
    };
    fs::write(images_path, encode_images(pixels, labels.len(), rows, cols))
        .map_err(io(images_path))?;
    fs::write(labels_path, encode_labels(labels)).map_err(io(labels_path))?;
    Ok(())
}

/// Loads an image/label pair as a dataset of `[n, rows, cols]` pixels in `[0, 1]`.
///
/// `num_classes` defaults to one more than the largest label present.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    num_classes: Option<usize>,
) -> crate::error::Result<Dataset> {
    let ip = images_path.display().to_string();
    let lp = labels_path.display().to_string();
    let (pixels, n, rows, cols) = parse_images(&read_file(images_path)?, &ip)?;
    let labels = parse_labels(&read_file(labels_path)?, &lp)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1));
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let samples = Tensor::new(vec![n, rows, cols], data)?;
    Dataset::new(samples, labels.iter().map(|&l| l as usize).collect(), classes)
}
