//! Datasets, binary loaders and the non-IID partition schemes.

mod cifar;
mod idx;
mod partition;
mod synthetic;

pub use cifar::{load_cifar_binary, parse_cifar_bytes, to_cifar_bytes};
pub use idx::{load_idx, parse_idx_bytes, to_idx_bytes};
pub use partition::{
    apply_pixel_permutation, partition_class_split, partition_iid, partition_permuted,
    partition_shards,
};
pub use synthetic::{synthetic_blobs, synthetic_dataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled image set. Images are `[N, H, W, C]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().is_empty() || images.dim(0) != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images with {} labels",
                images.shape().first().copied().unwrap_or(0),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example image shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copy out the examples selected by `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per: usize = self.example_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        Dataset {
            images: Tensor::new(shape, data).expect("subset shape"),
            labels,
            classes: self.classes,
        }
    }

    /// Concatenate multiple datasets with identical example shapes.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::EmptyInput("concat of no datasets".into()))?;
        let per_shape = first.example_shape().to_vec();
        let classes = first.classes;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.example_shape() != per_shape || p.classes != classes {
                return Err(Error::InvalidArgument("concat of incompatible datasets".into()));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(&per_shape);
        Ok(Dataset {
            images: Tensor::new(shape, data)?,
            labels,
            classes,
        })
    }

    /// Histogram of label counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

/// One client's slice of the training data.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub id: usize,
    pub data: Dataset,
    /// Pixel permutation defining this client's input distribution, when the
    /// partition scheme uses one; it must also be applied to any evaluation
    /// data derived for the client.
    pub pixel_perm: Option<Vec<usize>>,
}

impl ClientDataset {
    pub fn n(&self) -> usize {
        self.data.len()
    }
}
