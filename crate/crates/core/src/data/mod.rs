//! Dataset ingestion: MNIST IDX files, whitened patches, the PVLB cache
//! format and synthetic sparse data.

mod cache;
mod idx;
mod patches;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use cache::{
    export_split, import_patch_archive, read_split_bytes, split_to_bytes, CACHE_VERSION,
};
pub use idx::{load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels, MNIST_SIDE};
pub use patches::{
    extract_patches, extract_whitened_patches, PatchOptions, PatchReport, WhiteningTransform,
};
pub use synth::synth_sparse_dataset;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Provenance carried with every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub source: String,
    /// Side length of square patches; 0 for whole images.
    pub patch_size: usize,
    pub preprocessing: String,
    /// Payload checksum, set when the split was read from or written to a cache.
    #[serde(skip)]
    pub checksum: Option<u64>,
}

/// `N × M` samples with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    samples: Matrix,
    labels: Option<Vec<u8>>,
    pub meta: SplitMeta,
}

impl DatasetSplit {
    pub fn new(samples: Matrix, labels: Option<Vec<u8>>, meta: SplitMeta) -> Result<Self> {
        if !samples.is_finite() {
            return Err(Error::data(format!(
                "split '{}' contains non-finite values",
                meta.source
            )));
        }
        if let Some(l) = &labels {
            if l.len() != samples.rows() {
                return Err(Error::data(format!(
                    "split '{}' has {} samples but {} labels",
                    meta.source,
                    samples.rows(),
                    l.len()
                )));
            }
        }
        Ok(Self {
            samples,
            labels,
            meta,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Rows `idx` in order, labels included.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: self.samples.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            meta: SplitMeta {
                checksum: None,
                ..self.meta.clone()
            },
        }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn into_parts(self) -> (Matrix, Option<Vec<u8>>, SplitMeta) {
        (self.samples, self.labels, self.meta)
    }
}

/// Root directory for datasets: `PVAE_DATA_DIR` if set, else `data/`.
pub fn data_root() -> PathBuf {
    std::env::var_os("PVAE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> SplitMeta {
        SplitMeta {
            source: "t".into(),
            patch_size: 0,
            preprocessing: String::new(),
            checksum: None,
        }
    }

    #[test]
    fn rejects_non_finite_and_label_mismatch() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(DatasetSplit::new(m, None, meta()).is_err());
        assert!(DatasetSplit::new(Matrix::zeros(2, 2), Some(vec![1]), meta()).is_err());
    }

    #[test]
    fn subset_keeps_labels_aligned() {
        let s = DatasetSplit::new(
            Matrix::from_fn(4, 1, |i, _| i as f64),
            Some(vec![10, 11, 12, 13]),
            meta(),
        )
        .unwrap();
        let t = s.subset(&[3, 1]);
        assert_eq!(t.samples().as_slice(), &[3.0, 1.0]);
        assert_eq!(t.labels().unwrap(), &[13, 11]);
        assert_eq!(s.head(2).len(), 2);
    }
}
