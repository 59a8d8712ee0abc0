//! Learning-rate schedule and the built-in gradient checker.

use crate::error::{Error, Result};
use crate::nn::{backward, cross_entropy, forward, Mode, Model};
use crate::tensor::Tensor;

/// Exponential decay: `base_lr * decay^round`.
pub fn lr_schedule(base_lr: f64, decay: f64, round: usize) -> f64 {
    base_lr * decay.powi(round as i32)
}

/// Compare analytic parameter gradients against central finite differences.
///
/// Runs in eval mode so dropout is deterministic. Returns the worst relative
/// error over all parameters, with near-zero gradients compared on an
/// absolute scale of 1e-6.
pub fn grad_check(model: &Model, images: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a positive finite eps, got {eps}"
        )));
    }
    let trace = forward(model, images, Mode::Eval, 0)?;
    let (_, grad_logits) = cross_entropy(&trace.output, labels)?;
    let grads = backward(model, &trace, &grad_logits, None)?;

    let loss_at = |m: &Model| -> Result<f64> {
        let t = forward(m, images, Mode::Eval, 0)?;
        Ok(cross_entropy(&t.output, labels)?.0)
    };

    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for layer_idx in 0..model.layers.len() {
        let Some((gw, gb)) = &grads.layers[layer_idx] else {
            continue;
        };
        for (slot, analytic_tensor) in [(0usize, gw), (1usize, gb)] {
            for i in 0..analytic_tensor.len() {
                let original = {
                    let p = param_entry(&mut probe, layer_idx, slot, i);
                    let v = *p;
                    *p = v + eps;
                    v
                };
                let up = loss_at(&probe)?;
                *param_entry(&mut probe, layer_idx, slot, i) = original - eps;
                let down = loss_at(&probe)?;
                *param_entry(&mut probe, layer_idx, slot, i) = original;

                let numeric = (up - down) / (2.0 * eps);
                let analytic = analytic_tensor.data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(((analytic - numeric) / denom).abs());
            }
        }
    }
    Ok(worst)
}

fn param_entry<'m>(model: &'m mut Model, layer_idx: usize, slot: usize, i: usize) -> &'m mut f64 {
    use crate::nn::Layer;
    let (w, b) = match &mut model.layers[layer_idx] {
        Layer::Conv2d(c) => (&mut c.weight, &mut c.bias),
        Layer::Dense(d) => (&mut d.weight, &mut d.bias),
        _ => panic!("parameterless layer in grad path"),
    };
    let t = if slot == 0 { w } else { b };
    &mut t.data_mut()[i]
}
