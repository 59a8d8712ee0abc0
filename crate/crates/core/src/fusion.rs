//! Feature-fusion operators combining global and local feature maps.
//!
//! All three operators map a pair of `[C, H, W]` maps to one `[C, H, W]` map:
//! `Conv` mixes the channel-concatenated pair (global channels first) with a
//! learned `[2C, C]` matrix acting as a 1x1 convolution, `Multi` blends per
//! channel with a weight vector, `Single` blends with one scalar. Blend
//! weights are kept in `[0, 1]` by clamping after every update.

use crate::error::{Error, Result};
use crate::tensor::{linalg, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    Conv,
    Multi,
    Single,
}

impl FusionVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "conv" => Ok(FusionVariant::Conv),
            "multi" => Ok(FusionVariant::Multi),
            "single" => Ok(FusionVariant::Single),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion variant `{other}` (expected conv, multi or single)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionOperator {
    /// 1x1 mixing of the concatenated streams; weight is `[2C, C]`.
    Conv { weight: Tensor },
    /// Per-channel convex blend; lambda is `[C]`.
    Multi { lambda: Tensor },
    /// Scalar convex blend.
    Single { lambda: f64 },
}

impl FusionOperator {
    /// Neutral initialization: an equal mixture of both streams.
    pub fn neutral(variant: FusionVariant, channels: usize) -> Self {
        match variant {
            FusionVariant::Conv => {
                let mut w = Tensor::zeros(vec![2 * channels, channels]);
                for c in 0..channels {
                    w.data_mut()[c * channels + c] = 0.5;
                    w.data_mut()[(channels + c) * channels + c] = 0.5;
                }
                FusionOperator::Conv { weight: w }
            }
            FusionVariant::Multi => FusionOperator::Multi {
                lambda: Tensor::filled(vec![channels], 0.5),
            },
            FusionVariant::Single => FusionOperator::Single { lambda: 0.5 },
        }
    }

    pub fn variant(&self) -> FusionVariant {
        match self {
            FusionOperator::Conv { .. } => FusionVariant::Conv,
            FusionOperator::Multi { .. } => FusionVariant::Multi,
            FusionOperator::Single { .. } => FusionVariant::Single,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FusionOperator::Conv { weight } => weight.len(),
            FusionOperator::Multi { lambda } => lambda.len(),
            FusionOperator::Single { .. } => 1,
        }
    }

    /// Channel count the operator is sized for; `None` for the scalar blend,
    /// which fits any width.
    pub fn channels(&self) -> Option<usize> {
        match self {
            FusionOperator::Conv { weight } => Some(weight.dim(1)),
            FusionOperator::Multi { lambda } => Some(lambda.len()),
            FusionOperator::Single { .. } => None,
        }
    }
}

/// Parameter gradients for one operator.
#[derive(Debug, Clone)]
pub enum FusionGrads {
    Conv { weight: Tensor },
    Multi { lambda: Tensor },
    Single { lambda: f64 },
}

fn check_streams(op: &FusionOperator, fg: &Tensor, fl: &Tensor) -> Result<(usize, usize)> {
    if fg.shape() != fl.shape() {
        return Err(Error::shape("fusion streams", fg.shape(), fl.shape()));
    }
    if fg.shape().is_empty() {
        return Err(Error::InvalidArgument("fusion input needs a channel axis".into()));
    }
    let channels = fg.dim(0);
    let spatial = fg.len() / channels;
    if let Some(c) = op.channels() {
        if c != channels {
            return Err(Error::InvalidArgument(format!(
                "fusion operator sized for {c} channels applied to {channels}"
            )));
        }
    }
    Ok((channels, spatial))
}

/// Fuse one pair of `[C, H, W]` feature maps.
pub fn fuse_forward(op: &FusionOperator, fg: &Tensor, fl: &Tensor) -> Result<Tensor> {
    let (channels, spatial) = check_streams(op, fg, fl)?;
    let mut out = Tensor::zeros(fg.shape().to_vec());
    fuse_forward_into(op, fg.data(), fl.data(), channels, spatial, out.data_mut());
    Ok(out)
}

fn fuse_forward_into(
    op: &FusionOperator,
    fg: &[f64],
    fl: &[f64],
    channels: usize,
    spatial: usize,
    out: &mut [f64],
) {
    match op {
        FusionOperator::Conv { weight } => {
            // concat along the channel axis is plain buffer concatenation
            let mut concat = Vec::with_capacity(2 * channels * spatial);
            concat.extend_from_slice(fg);
            concat.extend_from_slice(fl);
            linalg::matmul_tn(weight.data(), &concat, 2 * channels, channels, spatial, out);
        }
        FusionOperator::Multi { lambda } => {
            for (c, &l) in lambda.data().iter().enumerate() {
                let o = &mut out[c * spatial..(c + 1) * spatial];
                let g = &fg[c * spatial..(c + 1) * spatial];
                let f = &fl[c * spatial..(c + 1) * spatial];
                blend_into(l, g, f, o);
            }
        }
        FusionOperator::Single { lambda } => blend_into(*lambda, fg, fl, out),
    }
}

/// `out = l*g + (1-l)*f`, reproducing a stream bit-exactly at the endpoints.
fn blend_into(l: f64, g: &[f64], f: &[f64], out: &mut [f64]) {
    if l == 0.0 {
        out.copy_from_slice(f);
    } else if l == 1.0 {
        out.copy_from_slice(g);
    } else {
        for ((o, &gv), &fv) in out.iter_mut().zip(g).zip(f) {
            *o = l * gv + (1.0 - l) * fv;
        }
    }
}

/// Gradients of the fused output with respect to the local stream and the
/// operator parameters. The global stream is frozen: no gradient for it.
pub fn fuse_backward(
    op: &FusionOperator,
    fg: &Tensor,
    fl: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, FusionGrads)> {
    let (channels, spatial) = check_streams(op, fg, fl)?;
    if grad_out.shape() != fg.shape() {
        return Err(Error::shape("fusion grad_out", fg.shape(), grad_out.shape()));
    }
    let mut grad_fl = Tensor::zeros(fl.shape().to_vec());
    let grads = fuse_backward_into(
        op,
        fg.data(),
        fl.data(),
        grad_out.data(),
        channels,
        spatial,
        grad_fl.data_mut(),
        None,
    );
    Ok((grad_fl, grads))
}

#[allow(clippy::too_many_arguments)]
fn fuse_backward_into(
    op: &FusionOperator,
    fg: &[f64],
    fl: &[f64],
    grad_out: &[f64],
    channels: usize,
    spatial: usize,
    grad_fl: &mut [f64],
    accumulate: Option<&mut FusionGrads>,
) -> FusionGrads {
    let mut grads = match accumulate {
        Some(g) => g.clone(),
        None => match op {
            FusionOperator::Conv { weight } => FusionGrads::Conv {
                weight: Tensor::zeros(weight.shape().to_vec()),
            },
            FusionOperator::Multi { lambda } => FusionGrads::Multi {
                lambda: Tensor::zeros(vec![lambda.len()]),
            },
            FusionOperator::Single { .. } => FusionGrads::Single { lambda: 0.0 },
        },
    };
    match (op, &mut grads) {
        (FusionOperator::Conv { weight }, FusionGrads::Conv { weight: gw }) => {
            let mut concat = Vec::with_capacity(2 * channels * spatial);
            concat.extend_from_slice(fg);
            concat.extend_from_slice(fl);
            // grad wrt concat = W * grad_out; local stream is the second half
            let mut grad_concat = vec![0.0; 2 * channels * spatial];
            linalg::matmul_nn(
                weight.data(),
                grad_out,
                2 * channels,
                channels,
                spatial,
                &mut grad_concat,
            );
            for (o, &g) in grad_fl.iter_mut().zip(&grad_concat[channels * spatial..]) {
                *o += g;
            }
            linalg::matmul_nt(
                &concat,
                grad_out,
                2 * channels,
                spatial,
                channels,
                gw.data_mut(),
            );
        }
        (FusionOperator::Multi { lambda }, FusionGrads::Multi { lambda: gl }) => {
            for (c, &l) in lambda.data().iter().enumerate() {
                let rng = c * spatial..(c + 1) * spatial;
                let g = &fg[rng.clone()];
                let f = &fl[rng.clone()];
                let go = &grad_out[rng.clone()];
                let gfl = &mut grad_fl[rng];
                let mut acc = 0.0;
                blend_grad(l, g, f, go, gfl, &mut acc);
                gl.data_mut()[c] += acc;
            }
        }
        (FusionOperator::Single { lambda }, FusionGrads::Single { lambda: gl }) => {
            let mut acc = 0.0;
            blend_grad(*lambda, fg, fl, grad_out, grad_fl, &mut acc);
            *gl += acc;
        }
        _ => unreachable!("gradient accumulator matches operator variant"),
    }
    grads
}

/// grad_fl += (1-l) * grad_out; grad_l += sum((g - f) .* grad_out)
fn blend_grad(l: f64, g: &[f64], f: &[f64], grad_out: &[f64], grad_fl: &mut [f64], grad_l: &mut f64) {
    if l == 0.0 {
        for (o, &go) in grad_fl.iter_mut().zip(grad_out) {
            *o += go;
        }
    } else {
        let w = 1.0 - l;
        for (o, &go) in grad_fl.iter_mut().zip(grad_out) {
            *o += w * go;
        }
    }
    for ((&gv, &fv), &go) in g.iter().zip(f).zip(grad_out) {
        *grad_l += (gv - fv) * go;
    }
}

/// Batched fusion over `[N, C, H, W]` stacks.
pub fn fuse_forward_batch(op: &FusionOperator, fg: &Tensor, fl: &Tensor) -> Result<Tensor> {
    if fg.shape() != fl.shape() {
        return Err(Error::shape("fusion streams", fg.shape(), fl.shape()));
    }
    if fg.shape().len() < 2 {
        return Err(Error::InvalidArgument("batched fusion expects [N, C, ...]".into()));
    }
    let n = fg.dim(0);
    let channels = fg.dim(1);
    let spatial = fg.len() / (n * channels);
    if let Some(c) = op.channels() {
        if c != channels {
            return Err(Error::InvalidArgument(format!(
                "fusion operator sized for {c} channels applied to {channels}"
            )));
        }
    }
    let mut out = Tensor::zeros(fg.shape().to_vec());
    let per = channels * spatial;
    for i in 0..n {
        fuse_forward_into(
            op,
            &fg.data()[i * per..(i + 1) * per],
            &fl.data()[i * per..(i + 1) * per],
            channels,
            spatial,
            &mut out.data_mut()[i * per..(i + 1) * per],
        );
    }
    Ok(out)
}

/// Batched backward; parameter gradients are summed over the batch.
pub fn fuse_backward_batch(
    op: &FusionOperator,
    fg: &Tensor,
    fl: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, FusionGrads)> {
    if fg.shape() != fl.shape() || grad_out.shape() != fg.shape() {
        return Err(Error::shape("fusion backward streams", fg.shape(), grad_out.shape()));
    }
    let n = fg.dim(0);
    let channels = fg.dim(1);
    let spatial = fg.len() / (n * channels);
    let per = channels * spatial;
    let mut grad_fl = Tensor::zeros(fl.shape().to_vec());
    let mut grads = match op {
        FusionOperator::Conv { weight } => FusionGrads::Conv {
            weight: Tensor::zeros(weight.shape().to_vec()),
        },
        FusionOperator::Multi { lambda } => FusionGrads::Multi {
            lambda: Tensor::zeros(vec![lambda.len()]),
        },
        FusionOperator::Single { .. } => FusionGrads::Single { lambda: 0.0 },
    };
    for i in 0..n {
        grads = fuse_backward_into(
            op,
            &fg.data()[i * per..(i + 1) * per],
            &fl.data()[i * per..(i + 1) * per],
            &grad_out.data()[i * per..(i + 1) * per],
            channels,
            spatial,
            &mut grad_fl.data_mut()[i * per..(i + 1) * per],
            Some(&mut grads),
        );
    }
    Ok((grad_fl, grads))
}

/// Clamp blend weights into `[0, 1]`; the conv operator is unconstrained.
pub fn constrain(op: FusionOperator) -> FusionOperator {
    match op {
        FusionOperator::Multi { lambda } => FusionOperator::Multi {
            lambda: lambda.map(|v| v.clamp(0.0, 1.0)),
        },
        FusionOperator::Single { lambda } => FusionOperator::Single {
            lambda: lambda.clamp(0.0, 1.0),
        },
        conv => conv,
    }
}

/// SGD update on the operator parameters (no clamping; compose with
/// `constrain`).
pub fn fusion_sgd_step(op: &mut FusionOperator, grads: &FusionGrads, lr: f64) -> Result<()> {
    match (op, grads) {
        (FusionOperator::Conv { weight }, FusionGrads::Conv { weight: g }) => {
            weight.add_assign_scaled(g, -lr)?;
        }
        (FusionOperator::Multi { lambda }, FusionGrads::Multi { lambda: g }) => {
            lambda.add_assign_scaled(g, -lr)?;
        }
        (FusionOperator::Single { lambda }, FusionGrads::Single { lambda: g }) => {
            *lambda -= lr * g;
        }
        _ => {
            return Err(Error::InvalidArgument(
                "fusion gradient variant does not match operator".into(),
            ))
        }
    }
    Ok(())
}

/// Server-side aggregation of client fusion operators.
///
/// Conv weights take a plain size-weighted average. Blend weights are
/// smoothed with an exponential moving average against the previous global
/// value (`beta` on the old value) and clamped back into `[0, 1]`.
pub fn aggregate_fusion(
    client_ops: &[FusionOperator],
    weights: &[f64],
    prev_global: &FusionOperator,
    beta: f64,
) -> Result<FusionOperator> {
    if client_ops.is_empty() || client_ops.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fusion operators with {} weights",
            client_ops.len(),
            weights.len()
        )));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("ema beta {beta} outside [0, 1)")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "aggregation weights must be nonnegative and sum to 1, got sum {total}"
        )));
    }
    let variant = prev_global.variant();
    if client_ops.iter().any(|op| op.variant() != variant)
        || client_ops.iter().any(|op| op.channels() != prev_global.channels())
    {
        return Err(Error::InvalidArgument(
            "mixed fusion variants or channel widths in aggregation".into(),
        ));
    }
    match prev_global {
        FusionOperator::Conv { weight } => {
            let mut acc = Tensor::zeros(weight.shape().to_vec());
            for (op, &w) in client_ops.iter().zip(weights) {
                let FusionOperator::Conv { weight: cw } = op else { unreachable!() };
                acc.add_assign_scaled(cw, w)?;
            }
            Ok(FusionOperator::Conv { weight: acc })
        }
        FusionOperator::Multi { lambda } => {
            let mut acc = Tensor::zeros(vec![lambda.len()]);
            for (op, &w) in client_ops.iter().zip(weights) {
                let FusionOperator::Multi { lambda: cl } = op else { unreachable!() };
                acc.add_assign_scaled(cl, w)?;
            }
            let mut blended = lambda.scale(beta);
            blended.add_assign_scaled(&acc, 1.0 - beta)?;
            Ok(constrain(FusionOperator::Multi { lambda: blended }))
        }
        FusionOperator::Single { lambda } => {
            let mean: f64 = client_ops
                .iter()
                .zip(weights)
                .map(|(op, &w)| {
                    let FusionOperator::Single { lambda: cl } = op else { unreachable!() };
                    w * cl
                })
                .sum();
            Ok(constrain(FusionOperator::Single {
                lambda: beta * lambda + (1.0 - beta) * mean,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(c: usize, h: usize, w: usize) -> (Tensor, Tensor) {
        let fg = Tensor::from_fn(vec![c, h, w], |i| (i as f64 * 0.37).sin() + 0.2);
        let fl = Tensor::from_fn(vec![c, h, w], |i| (i as f64 * 0.61).cos() - 0.1);
        (fg, fl)
    }

    #[test]
    fn single_endpoints_are_bit_exact() {
        let (fg, fl) = maps(3, 2, 2);
        let all_g = fuse_forward(&FusionOperator::Single { lambda: 1.0 }, &fg, &fl).unwrap();
        assert_eq!(all_g.data(), fg.data());
        let all_l = fuse_forward(&FusionOperator::Single { lambda: 0.0 }, &fg, &fl).unwrap();
        assert_eq!(all_l.data(), fl.data());
    }

    #[test]
    fn single_midpoint_blend() {
        let fg = Tensor::filled(vec![2, 2, 2], 2.0);
        let fl = Tensor::filled(vec![2, 2, 2], 4.0);
        let out = fuse_forward(&FusionOperator::Single { lambda: 0.5 }, &fg, &fl).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn conv_selector_weights_pick_one_stream() {
        let (fg, fl) = maps(3, 2, 2);
        let c = 3;
        let mut top = Tensor::zeros(vec![2 * c, c]);
        for i in 0..c {
            top.data_mut()[i * c + i] = 1.0;
        }
        let picked = fuse_forward(&FusionOperator::Conv { weight: top }, &fg, &fl).unwrap();
        assert_eq!(picked.data(), fg.data());

        let mut bottom = Tensor::zeros(vec![2 * c, c]);
        for i in 0..c {
            bottom.data_mut()[(c + i) * c + i] = 1.0;
        }
        let picked = fuse_forward(&FusionOperator::Conv { weight: bottom }, &fg, &fl).unwrap();
        assert_eq!(picked.data(), fl.data());
    }

    #[test]
    fn multi_per_channel_selection() {
        let (fg, fl) = maps(2, 2, 3);
        let op = FusionOperator::Multi {
            lambda: Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
        };
        let out = fuse_forward(&op, &fg, &fl).unwrap();
        assert_eq!(&out.data()[..6], &fg.data()[..6]);
        assert_eq!(&out.data()[6..], &fl.data()[6..]);
    }

    #[test]
    fn single_backward_closed_form() {
        let (fg, fl) = maps(2, 2, 2);
        let grad_out = Tensor::from_fn(vec![2, 2, 2], |i| 0.1 * i as f64 - 0.3);
        let lambda = 0.3;
        let (grad_fl, grads) =
            fuse_backward(&FusionOperator::Single { lambda }, &fg, &fl, &grad_out).unwrap();
        for (g, &go) in grad_fl.data().iter().zip(grad_out.data()) {
            assert!((g - 0.7 * go).abs() < 1e-15);
        }
        let FusionGrads::Single { lambda: gl } = grads else { panic!() };
        let expected: f64 = fg
            .data()
            .iter()
            .zip(fl.data())
            .zip(grad_out.data())
            .map(|((&g, &f), &go)| (g - f) * go)
            .sum();
        assert!((gl - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_out_zeroes_everything() {
        let (fg, fl) = maps(2, 3, 3);
        let zero = Tensor::zeros(vec![2, 3, 3]);
        for op in [
            FusionOperator::neutral(FusionVariant::Conv, 2),
            FusionOperator::neutral(FusionVariant::Multi, 2),
            FusionOperator::neutral(FusionVariant::Single, 2),
        ] {
            let (grad_fl, grads) = fuse_backward(&op, &fg, &fl, &zero).unwrap();
            assert!(grad_fl.data().iter().all(|&v| v == 0.0));
            let flat: Vec<f64> = match grads {
                FusionGrads::Conv { weight } => weight.into_data(),
                FusionGrads::Multi { lambda } => lambda.into_data(),
                FusionGrads::Single { lambda } => vec![lambda],
            };
            assert!(flat.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constrain_clamps_blend_weights() {
        let over = constrain(FusionOperator::Single { lambda: 1.3 });
        assert_eq!(over, FusionOperator::Single { lambda: 1.0 });
        let under = constrain(FusionOperator::Single { lambda: -0.2 });
        assert_eq!(under, FusionOperator::Single { lambda: 0.0 });
        let inside = constrain(FusionOperator::Single { lambda: 0.7 });
        assert_eq!(inside, FusionOperator::Single { lambda: 0.7 });

        let multi = constrain(FusionOperator::Multi {
            lambda: Tensor::new(vec![3], vec![-0.5, 0.25, 2.0]).unwrap(),
        });
        let FusionOperator::Multi { lambda } = multi else { panic!() };
        assert_eq!(lambda.data(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn aggregation_fixed_point_and_ema() {
        let ops = vec![
            FusionOperator::Single { lambda: 0.5 },
            FusionOperator::Single { lambda: 0.5 },
        ];
        let prev = FusionOperator::Single { lambda: 0.5 };
        for beta in [0.0, 0.3, 0.9] {
            let agg = aggregate_fusion(&ops, &[0.25, 0.75], &prev, beta).unwrap();
            assert_eq!(agg, FusionOperator::Single { lambda: 0.5 });
        }

        // beta = 0: pure weighted mean
        let ops = vec![
            FusionOperator::Single { lambda: 0.2 },
            FusionOperator::Single { lambda: 0.6 },
        ];
        let agg = aggregate_fusion(&ops, &[0.5, 0.5], &prev, 0.0).unwrap();
        let FusionOperator::Single { lambda } = agg else { panic!() };
        assert!((lambda - 0.4).abs() < 1e-15);

        // beta = 0.9, prev 0, client mean 1 -> 0.1
        let ones = vec![FusionOperator::Single { lambda: 1.0 }];
        let agg =
            aggregate_fusion(&ones, &[1.0], &FusionOperator::Single { lambda: 0.0 }, 0.9).unwrap();
        let FusionOperator::Single { lambda } = agg else { panic!() };
        assert!((lambda - 0.1).abs() < 1e-15);
    }

    #[test]
    fn aggregation_rejects_bad_inputs() {
        let prev = FusionOperator::Single { lambda: 0.5 };
        let mixed = vec![
            FusionOperator::Single { lambda: 0.5 },
            FusionOperator::neutral(FusionVariant::Multi, 2),
        ];
        assert!(aggregate_fusion(&mixed, &[0.5, 0.5], &prev, 0.5).is_err());
        let ok = vec![FusionOperator::Single { lambda: 0.5 }];
        assert!(aggregate_fusion(&ok, &[0.9], &prev, 0.5).is_err()); // weights sum != 1
    }

    #[test]
    fn output_shape_matches_streams() {
        let (fg, fl) = maps(4, 3, 5);
        for variant in [FusionVariant::Conv, FusionVariant::Multi, FusionVariant::Single] {
            let op = FusionOperator::neutral(variant, 4);
            let out = fuse_forward(&op, &fg, &fl).unwrap();
            assert_eq!(out.shape(), fg.shape());
        }
    }
}
