//! IDX image/label file parsing (the MNIST distribution format).
//!
//! Big-endian throughout: images carry magic 0x00000803 and dims `[N, H, W]`,
//! labels carry magic 0x00000801 and `[N]`. Pixels are bytes scaled by 1/255.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("truncated file while reading {what}"),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!(
                    "truncated file: {what} needs {} bytes past offset {}",
                    n, self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parse a pair of in-memory IDX buffers into a dataset.
pub fn parse_idx_bytes(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let mut img = Cursor { bytes: image_bytes, pos: 0 };
    let magic = img.u32("image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = img.u32("image count")? as usize;
    let h = img.u32("image rows")? as usize;
    let w = img.u32("image cols")? as usize;
    let pixels = img.take(n * h * w, "pixel data")?;
    if img.pos != image_bytes.len() {
        return Err(Error::Parse {
            offset: img.pos as u64,
            message: format!("{} trailing bytes after pixel data", image_bytes.len() - img.pos),
        });
    }

    let mut lab = Cursor { bytes: label_bytes, pos: 0 };
    let magic = lab.u32("label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let ln = lab.u32("label count")? as usize;
    if ln != n {
        return Err(Error::Parse {
            offset: 4,
            message: format!("label count {ln} does not match image count {n}"),
        });
    }
    let raw_labels = lab.take(ln, "label data")?;
    if lab.pos != label_bytes.len() {
        return Err(Error::Parse {
            offset: lab.pos as u64,
            message: format!("{} trailing bytes after label data", label_bytes.len() - lab.pos),
        });
    }

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(Tensor::new(vec![n, h, w, 1], data)?, labels, classes)
}

/// Load an IDX image/label file pair from disk.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|source| Error::Io {
        path: images_path.to_path_buf(),
        source,
    })?;
    let labels = fs::read(labels_path).map_err(|source| Error::Io {
        path: labels_path.to_path_buf(),
        source,
    })?;
    parse_idx_bytes(&images, &labels)
}

/// Serialize a dataset back to the IDX byte layout. Pixel values are
/// rescaled to bytes; parsing then re-serializing a valid file is exact.
pub fn to_idx_bytes(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let shape = ds.images.shape();
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let mut images = Vec::with_capacity(16 + n * h * w);
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&(h as u32).to_be_bytes());
    images.extend_from_slice(&(w as u32).to_be_bytes());
    images.extend(ds.images.data().iter().map(|&v| (v * 255.0).round() as u8));

    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx() -> (Vec<u8>, Vec<u8>) {
        // 2 images of 2x3 pixels
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&3u32.to_be_bytes());
        images.extend_from_slice(&[0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 3]);
        (images, labels)
    }

    #[test]
    fn parses_and_scales() {
        let (images, labels) = tiny_idx();
        let ds = parse_idx_bytes(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.shape(), &[2, 2, 3, 1]);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.data()[5], 1.0); // byte 255 scales to exactly 1.0
        assert_eq!(ds.images.data()[0], 0.0);
    }

    #[test]
    fn truncated_file_names_offset() {
        let (mut images, labels) = tiny_idx();
        images.truncate(images.len() - 3);
        let err = parse_idx_bytes(&images, &labels).unwrap_err();
        match err {
            Error::Parse { offset, message } => {
                assert_eq!(offset, 25);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let (mut images, labels) = tiny_idx();
        images[3] = 0x99;
        assert!(matches!(
            parse_idx_bytes(&images, &labels),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn count_mismatch_rejected() {
        let (images, mut labels) = tiny_idx();
        labels[7] = 3; // claim 3 labels
        labels.push(1);
        let err = parse_idx_bytes(&images, &labels).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let (images, labels) = tiny_idx();
        let ds = parse_idx_bytes(&images, &labels).unwrap();
        let (out_images, out_labels) = to_idx_bytes(&ds);
        assert_eq!(out_images, images);
        assert_eq!(out_labels, labels);
    }
}
