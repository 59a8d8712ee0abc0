//! CIFAR-10 binary batch parsing.
//!
//! Files are sequences of 3073-byte records: one label byte followed by
//! 3072 pixel bytes stored channel-planar (1024 R, 1024 G, 1024 B) over a
//! 32x32 grid. Pixels are scaled by 1/255 and interleaved to `[H, W, C]`.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RECORD: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// Parse one in-memory CIFAR binary batch.
pub fn parse_cifar_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!(
                "file length {} is not a positive multiple of the {RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0.0f64; n * PLANE * 3];
    for (rec, chunk) in bytes.chunks_exact(RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label > 9 {
            return Err(Error::Parse {
                offset: (rec * RECORD) as u64,
                message: format!("label byte {label} exceeds 9"),
            });
        }
        labels.push(label);
        let pixels = &chunk[1..];
        let base = rec * PLANE * 3;
        for p in 0..PLANE {
            for ch in 0..3 {
                data[base + p * 3 + ch] = pixels[ch * PLANE + p] as f64 / 255.0;
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, SIDE, SIDE, 3], data)?, labels, 10)
}

/// Load and concatenate CIFAR binary batches.
pub fn load_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::EmptyInput("no CIFAR batch files given".into()));
    }
    let mut parts = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(p.as_ref()).map_err(|source| Error::Io {
            path: p.as_ref().to_path_buf(),
            source,
        })?;
        parts.push(parse_cifar_bytes(&bytes)?);
    }
    let refs: Vec<&Dataset> = parts.iter().collect();
    Dataset::concat(&refs)
}

/// Serialize back to the binary record layout (inverse of
/// `parse_cifar_bytes` on valid input).
pub fn to_cifar_bytes(ds: &Dataset) -> Vec<u8> {
    let n = ds.len();
    let mut out = Vec::with_capacity(n * RECORD);
    for rec in 0..n {
        out.push(ds.labels[rec] as u8);
        let img = ds.images.row(rec);
        for ch in 0..3 {
            for p in 0..PLANE {
                out.push((img[p * 3 + ch] * 255.0).round() as u8);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, seed: u8) -> Vec<u8> {
        let mut rec = Vec::with_capacity(RECORD);
        rec.push(label);
        rec.extend((0..3072u32).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)));
        rec
    }

    #[test]
    fn single_record_parses() {
        let bytes = record(7, 3);
        let ds = parse_cifar_bytes(&bytes).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 32, 32, 3]);
        // planar red plane starts at pixel byte 0 -> interleaved channel 0
        assert_eq!(ds.images.data()[0], bytes[1] as f64 / 255.0);
        assert_eq!(ds.images.data()[1], bytes[1 + PLANE] as f64 / 255.0);
    }

    #[test]
    fn bad_framing_rejected() {
        let mut bytes = record(1, 0);
        bytes.push(0); // 3074 bytes
        assert!(matches!(parse_cifar_bytes(&bytes), Err(Error::Parse { .. })));
        assert!(parse_cifar_bytes(&[]).is_err());
    }

    #[test]
    fn label_over_nine_rejected() {
        let bytes = record(10, 0);
        let err = parse_cifar_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let mut bytes = record(0, 11);
        bytes.extend(record(9, 200));
        bytes.extend(record(4, 77));
        let ds = parse_cifar_bytes(&bytes).unwrap();
        assert_eq!(to_cifar_bytes(&ds), bytes);
    }
}
