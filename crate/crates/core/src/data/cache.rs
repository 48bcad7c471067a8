//! PVLB cache files.
//!
//! ```text
//! "PVLB"  u16 version  u16 flags  u64 N  u64 M  u64 patch
//! u32 meta-len  meta (UTF-8 JSON)
//! payload: f32 × N·M, then u8 × N labels if flag bit 0
//! u64 checksum (first 8 bytes of SHA-256 of the payload)
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{read_file, DatasetSplit, SplitMeta};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

const MAGIC: &[u8; 4] = b"PVLB";
pub const CACHE_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

fn checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Serializes a split; samples are stored in single precision.
pub fn split_to_bytes(split: &DatasetSplit) -> Vec<u8> {
    let (n, m) = split.samples().shape();
    let mut out = Vec::with_capacity(64 + n * m * 4 + n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    let flags = if split.labels().is_some() {
        FLAG_LABELS
    } else {
        0
    };
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [n as u64, m as u64, split.meta.patch_size as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let meta = serde_json::to_vec(&split.meta).expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let start = out.len();
    for v in split.samples().as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(l) = split.labels() {
        out.extend_from_slice(l);
    }
    let sum = checksum(&out[start..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn read_split_bytes(bytes: &[u8], what: &str) -> Result<DatasetSplit> {
    let err = |msg: String| Error::data(format!("{what}: {msg}"));
    let need = |end: usize| {
        if bytes.len() < end {
            Err(err(format!(
                "truncated file, missing bytes {}..{end}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(30)?;
    if &bytes[..4] != MAGIC {
        return Err(err("not a PVLB cache (bad magic)".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(err(format!("unsupported cache version {version}")));
    }
    let flags = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let (n, m, patch) = (word(8), word(16), word(24));
    need(36)?;
    let meta_len = u32::from_le_bytes(bytes[32..36].try_into().unwrap()) as usize;
    let meta_end = 36 + meta_len;
    need(meta_end)?;
    let mut meta: SplitMeta = serde_json::from_slice(&bytes[36..meta_end])
        .map_err(|e| err(format!("bad metadata: {e}")))?;
    if meta.patch_size != patch {
        return Err(err(format!(
            "header patch size {patch} disagrees with metadata {}",
            meta.patch_size
        )));
    }
    let n_labels = if flags & FLAG_LABELS != 0 { n } else { 0 };
    let payload_len = n
        .checked_mul(m)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(n_labels))
        .ok_or_else(|| err("declared size overflows".into()))?;
    let payload_end = meta_end + payload_len;
    need(payload_end + 8)?;
    if bytes.len() != payload_end + 8 {
        return Err(err(format!(
            "size {} disagrees with declared {n}x{m} payload ({} bytes expected)",
            bytes.len(),
            payload_end + 8
        )));
    }
    let payload = &bytes[meta_end..payload_end];
    let stored = u64::from_le_bytes(bytes[payload_end..].try_into().unwrap());
    let actual = checksum(payload);
    if stored != actual {
        return Err(err(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    let data = payload[..n * m * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let labels = (n_labels > 0 || flags & FLAG_LABELS != 0).then(|| payload[n * m * 4..].to_vec());
    meta.checksum = Some(actual);
    DatasetSplit::new(Matrix::new(n, m, data)?, labels, meta)
}

/// Writes `split` to `path` and returns the payload checksum.
pub fn export_split(split: &DatasetSplit, path: &Path) -> Result<u64> {
    let bytes = split_to_bytes(split);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(
        bytes[bytes.len() - 8..].try_into().unwrap(),
    ))
}

/// Reads and validates a PVLB file.
pub fn import_patch_archive(path: &Path) -> Result<DatasetSplit> {
    read_split_bytes(&read_file(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    fn sample(labels: bool) -> DatasetSplit {
        let mut rng = RngStream::new(0, 0);
        DatasetSplit::new(
            Matrix::from_fn(7, 5, |_, _| rng.normal()),
            labels.then(|| (0..7).map(|i| (i % 10) as u8).collect()),
            SplitMeta {
                source: "test".into(),
                patch_size: 4,
                preprocessing: "none".into(),
                checksum: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn reimport_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for labels in [false, true] {
            let p = dir.path().join(format!("s{labels}.pvlb"));
            export_split(&sample(labels), &p).unwrap();
            let a = import_patch_archive(&p).unwrap();
            let p2 = dir.path().join("again.pvlb");
            let sum = export_split(&a, &p2).unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
            let b = import_patch_archive(&p2).unwrap();
            assert_eq!(a, b);
            assert_eq!(b.meta.checksum, Some(sum));
            assert_eq!(a.labels().is_some(), labels);
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = split_to_bytes(&sample(true));
        let at = bytes.len() - 20;
        bytes[at] ^= 0x40;
        let e = read_split_bytes(&bytes, "x").unwrap_err().to_string();
        assert!(e.contains("checksum"), "{e}");
    }

    #[test]
    fn shape_disagreement_detected() {
        let bytes = split_to_bytes(&sample(false));
        let mut longer = bytes.clone();
        longer.insert(100, 0);
        assert!(read_split_bytes(&longer, "x").is_err());
        let mut bad_n = bytes;
        bad_n[8] = 9;
        assert!(read_split_bytes(&bad_n, "x").is_err());
    }
}
