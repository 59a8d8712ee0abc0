//! Shared helpers for the oracle test suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use fedsim_core::rng::rng_from;
use fedsim_core::Tensor;

/// Central finite differences of a scalar function at `point`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let up = f(&probe);
        probe[i] = point[i] - eps;
        let down = f(&probe);
        probe[i] = point[i];
        grads.push((up - down) / (2.0 * eps));
    }
    grads
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn worst_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    rng_from(seed, &[99])
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}
