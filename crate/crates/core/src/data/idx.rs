use std::fs;
use std::path::Path;

use crate::error::{PviError, Result};
use crate::models::Dataset;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// One byte per pixel, image-major.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| PviError::Io("truncated IDX header".into()))
}

/// Parse an IDX3 image file (`magic 0x00000803`).
pub fn read_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(PviError::Io(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(PviError::Io(format!(
            "IDX image payload has {} bytes, header implies {}",
            body.len(),
            n * rows * cols
        )));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

/// Parse an IDX1 label file (`magic 0x00000801`).
pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(PviError::Io(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(PviError::Io(format!(
            "IDX label payload has {} bytes, header implies {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Load MNIST training data from `dir` if both IDX files exist, scaling
/// pixels to `[0, 1]` and keeping the first `limit` images. Returns
/// `Ok(None)` when the files are absent.
pub fn load_mnist(dir: &Path, limit: Option<usize>) -> Result<Option<Dataset>> {
    let (ip, lp) = (dir.join(MNIST_TRAIN_IMAGES), dir.join(MNIST_TRAIN_LABELS));
    if !ip.exists() || !lp.exists() {
        return Ok(None);
    }
    let images = read_idx_images(&fs::read(&ip)?)?;
    let labels = read_idx_labels(&fs::read(&lp)?)?;
    if images.len() != labels.len() {
        return Err(PviError::DimensionMismatch {
            expected: images.len(),
            found: labels.len(),
        });
    }
    let n = limit.map_or(labels.len(), |l| l.min(labels.len()));
    let d = images.rows * images.cols;
    let inputs = images.pixels[..n * d].iter().map(|&p| p as f64 / 255.0).collect();
    let targets = labels[..n].iter().map(|&l| l as f64).collect();
    Dataset::from_flat(inputs, d, targets).map(Some)
}
