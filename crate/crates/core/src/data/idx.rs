use std::path::Path;

use super::{read_file, DatasetSplit, SplitMeta};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const MNIST_SIDE: usize = 28;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(what, at, at + 4, bytes.len()))
}

fn truncated(what: &str, from: usize, to: usize, len: usize) -> Error {
    Error::data(format!(
        "{what}: truncated file, missing bytes {}..{to} (file has {len} bytes)",
        from.max(len)
    ))
}

/// Parses an IDX image file into `(pixels scaled to [0, 1], rows, cols)`.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<(Matrix, usize, usize)> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::data(format!(
            "{what}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let m = rows * cols;
    let end = 16 + n * m;
    if bytes.len() < end {
        return Err(truncated(what, bytes.len(), end, bytes.len()));
    }
    let data = bytes[16..end].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Matrix::new(n, m, data)?, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != LABELS_MAGIC {
        return Err(Error::data(format!(
            "{what}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let end = 8 + n;
    if bytes.len() < end {
        return Err(truncated(what, bytes.len(), end, bytes.len()));
    }
    let labels = bytes[8..end].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::data(format!("{what}: label {bad} outside 0..=9")));
    }
    Ok(labels)
}

/// Loads an image file and its label file.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<DatasetSplit> {
    let img_name = images.display().to_string();
    let (samples, rows, cols) = parse_idx_images(&read_file(images)?, &img_name)?;
    let lab = parse_idx_labels(&read_file(labels)?, &labels.display().to_string())?;
    if lab.len() != samples.rows() {
        return Err(Error::data(format!(
            "{img_name} holds {} images but {} holds {} labels",
            samples.rows(),
            labels.display(),
            lab.len()
        )));
    }
    DatasetSplit::new(
        samples,
        Some(lab),
        SplitMeta {
            source: format!(
                "mnist:{}",
                images.file_name().and_then(|f| f.to_str()).unwrap_or("")
            ),
            patch_size: 0,
            preprocessing: format!("pixels/255 {rows}x{cols}"),
            checksum: None,
        },
    )
}

/// `(train, test)` from the four standard file names in `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}
