//! Softmax and cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of a `[N, K]` logits tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let n = logits.dim(0);
    let k = logits.len() / n;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean negative log-likelihood over the batch plus its gradient with respect
/// to the logits: `(softmax(z) - onehot(y)) / N`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.dim(0);
    let k = logits.len() / n;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {n} rows",
            labels.len()
        )));
    }
    for &label in labels {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (row, &label) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * inv_n;
        }
        row[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}
