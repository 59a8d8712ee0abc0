//! Deterministic synthetic datasets for fast tests and desk-scale runs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Gaussian class-conditional blobs with per-class example counts.
///
/// Each class gets a mean image drawn uniformly in `[0.15, 0.85]` per pixel;
/// examples add `noise_sigma`-scaled Gaussian noise and are clamped to
/// `[0, 1]`. Example order is shuffled.
pub fn synthetic_blobs(
    counts: &[usize],
    shape: &[usize],
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if counts.is_empty() || counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument("every class needs at least one example".into()));
    }
    let dim: usize = shape.iter().product();
    if dim == 0 {
        return Err(Error::InvalidArgument(format!("empty example shape {shape:?}")));
    }
    let classes = counts.len();
    let n: usize = counts.iter().sum();
    let mut rng = rng_from(seed, &[10]);

    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.15..0.85)).collect())
        .collect();

    let mut order: Vec<usize> = (0..classes)
        .flat_map(|c| std::iter::repeat(c).take(counts[c]))
        .collect();
    order.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * dim);
    for &class in &order {
        let mean = &means[class];
        for &m in mean {
            let v = m + noise_sigma * standard_normal(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(shape);
    Dataset::new(Tensor::new(full_shape, data)?, order, classes)
}

/// Balanced synthetic dataset: `n` examples spread as evenly as possible over
/// `classes` Gaussian blobs at a high signal-to-noise ratio.
pub fn synthetic_dataset(n: usize, shape: &[usize], classes: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::InvalidArgument(format!(
            "need at least one example per class ({n} examples, {classes} classes)"
        )));
    }
    let base = n / classes;
    let extra = n % classes;
    let counts: Vec<usize> = (0..classes).map(|c| base + usize::from(c < extra)).collect();
    synthetic_blobs(&counts, shape, 0.1, seed)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u clamped away from 0
    let u: f64 = rng.random::<f64>().max(1e-16);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_labels() {
        let ds = synthetic_dataset(100, &[4, 4, 1], 2, 3).unwrap();
        let hist = ds.label_histogram();
        assert_eq!(hist, vec![50, 50]);
        assert_eq!(ds.images.shape(), &[100, 4, 4, 1]);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synthetic_dataset(40, &[3, 3, 1], 4, 7).unwrap();
        let b = synthetic_dataset(40, &[3, 3, 1], 4, 7).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let c = synthetic_dataset(40, &[3, 3, 1], 4, 8).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(synthetic_dataset(1, &[2, 2, 1], 2, 0).is_err());
        assert!(synthetic_blobs(&[3, 0], &[2, 2, 1], 0.1, 0).is_err());
    }
}
