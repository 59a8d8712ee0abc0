//! Layer kinds and their forward/backward kernels.
//!
//! Activations flow as `[N, H, W, C]` (channels-last) for spatial layers and
//! `[N, features]` for dense layers; a dense layer flattens whatever trailing
//! shape it receives. Convolutions are stride-1 with same padding, pooling is
//! valid (no padding).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{linalg, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[kernel, kernel, in_channels, out_channels]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// `[in_features, out_features]`
    pub weight: Tensor,
    /// `[out_features]`
    pub bias: Tensor,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool(MaxPool),
    Dense(Dense),
    Dropout(Dropout),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
            Layer::Dense(d) => d.weight.len() + d.bias.len(),
            _ => 0,
        }
    }

    /// Per-example output shape for a given per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[2] != c.in_channels {
                    return Err(Error::InvalidArgument(format!(
                        "conv2d expects [H, W, {}] input, got {:?}",
                        c.in_channels, input
                    )));
                }
                Ok(vec![input[0], input[1], c.out_channels])
            }
            Layer::MaxPool(p) => {
                if input.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "maxpool expects [H, W, C] input, got {:?}",
                        input
                    )));
                }
                let (h, w) = (input[0], input[1]);
                if h < p.kernel || w < p.kernel {
                    return Err(Error::InvalidArgument(format!(
                        "maxpool {}x{} does not fit input {:?}",
                        p.kernel, p.kernel, input
                    )));
                }
                Ok(vec![
                    (h - p.kernel) / p.stride + 1,
                    (w - p.kernel) / p.stride + 1,
                    input[2],
                ])
            }
            Layer::Dense(d) => {
                let flat: usize = input.iter().product();
                if flat != d.in_features {
                    return Err(Error::InvalidArgument(format!(
                        "dense expects {} input features, got {:?}",
                        d.in_features, input
                    )));
                }
                Ok(vec![d.out_features])
            }
            Layer::Relu | Layer::Dropout(_) => Ok(input.to_vec()),
        }
    }
}

/// Per-layer state recorded during the forward pass for use by backward.
#[derive(Debug, Clone)]
pub enum LayerAux {
    None,
    /// Flat input index of the max for each output element.
    PoolArgmax(Vec<usize>),
    /// Per-element multiplier (0 or 1/keep); absent in eval mode.
    DropoutScale(Option<Vec<f64>>),
}

pub(crate) fn layer_forward(
    layer: &Layer,
    x: &Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LayerAux)> {
    match layer {
        Layer::Conv2d(c) => Ok((conv_forward(c, x)?, LayerAux::None)),
        Layer::Relu => Ok((x.map(|v| if v > 0.0 { v } else { 0.0 }), LayerAux::None)),
        Layer::MaxPool(p) => {
            let (out, argmax) = pool_forward(p, x)?;
            Ok((out, LayerAux::PoolArgmax(argmax)))
        }
        Layer::Dense(d) => Ok((dense_forward(d, x)?, LayerAux::None)),
        Layer::Dropout(d) => match mode {
            Mode::Eval => Ok((x.clone(), LayerAux::DropoutScale(None))),
            Mode::Train => {
                let keep = 1.0 - d.rate;
                let inv = 1.0 / keep;
                let scale: Vec<f64> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < d.rate { 0.0 } else { inv })
                    .collect();
                let mut out = x.clone();
                for (o, s) in out.data_mut().iter_mut().zip(&scale) {
                    *o *= s;
                }
                Ok((out, LayerAux::DropoutScale(Some(scale))))
            }
        },
    }
}

/// Gradient of one layer: (weight grad, bias grad) if it has parameters,
/// plus the gradient with respect to the layer input.
pub(crate) fn layer_backward(
    layer: &Layer,
    input: &Tensor,
    aux: &LayerAux,
    grad_out: &Tensor,
) -> Result<(Option<(Tensor, Tensor)>, Tensor)> {
    match layer {
        Layer::Conv2d(c) => {
            let (gw, gb, gx) = conv_backward(c, input, grad_out)?;
            Ok((Some((gw, gb)), gx))
        }
        Layer::Relu => {
            let mut gx = grad_out.clone();
            for (g, &v) in gx.data_mut().iter_mut().zip(input.data()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok((None, gx))
        }
        Layer::MaxPool(_) => {
            let argmax = match aux {
                LayerAux::PoolArgmax(a) => a,
                _ => return Err(Error::InvalidArgument("pool trace missing argmax".into())),
            };
            let mut gx = Tensor::zeros(input.shape().to_vec());
            let gxd = gx.data_mut();
            for (g, &idx) in grad_out.data().iter().zip(argmax) {
                gxd[idx] += g;
            }
            Ok((None, gx))
        }
        Layer::Dense(d) => {
            let (gw, gb, gx) = dense_backward(d, input, grad_out)?;
            Ok((Some((gw, gb)), gx))
        }
        Layer::Dropout(_) => {
            let gx = match aux {
                LayerAux::DropoutScale(Some(scale)) => {
                    let mut gx = grad_out.clone();
                    for (g, s) in gx.data_mut().iter_mut().zip(scale) {
                        *g *= s;
                    }
                    gx
                }
                LayerAux::DropoutScale(None) => grad_out.clone(),
                _ => return Err(Error::InvalidArgument("dropout trace missing scale".into())),
            };
            Ok((None, gx))
        }
    }
}

fn conv_forward(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || shape[3] != c.in_channels {
        return Err(Error::shape(
            "conv2d input",
            &[0, 0, 0, c.in_channels],
            shape,
        ));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let (cin, cout, k) = (c.in_channels, c.out_channels, c.kernel);
    let pad = k / 2;
    let xd = x.data();
    let wd = c.weight.data();
    let bd = c.bias.data();

    let mut out = Tensor::zeros(vec![n, h, w, cout]);
    let od = out.data_mut();
    for row in od.chunks_exact_mut(cout) {
        row.copy_from_slice(bd);
    }
    for img in 0..n {
        for oh in 0..h {
            for kh in 0..k {
                let ih = oh as isize + kh as isize - pad as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let ih = ih as usize;
                for ow in 0..w {
                    let out_off = ((img * h + oh) * w + ow) * cout;
                    for kw in 0..k {
                        let iw = ow as isize + kw as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let iw = iw as usize;
                        let in_off = ((img * h + ih) * w + iw) * cin;
                        let w_off = (kh * k + kw) * cin * cout;
                        let out_row = &mut od[out_off..out_off + cout];
                        for ci in 0..cin {
                            let a = xd[in_off + ci];
                            if a == 0.0 {
                                continue;
                            }
                            let w_row = &wd[w_off + ci * cout..w_off + (ci + 1) * cout];
                            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                                *o += a * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_backward(c: &Conv2d, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let shape = x.shape();
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let (cin, cout, k) = (c.in_channels, c.out_channels, c.kernel);
    if grad_out.shape() != [n, h, w, cout] {
        return Err(Error::shape(
            "conv2d grad_out",
            &[n, h, w, cout],
            grad_out.shape(),
        ));
    }
    let pad = k / 2;
    let xd = x.data();
    let wd = c.weight.data();
    let gd = grad_out.data();

    let mut gw = Tensor::zeros(c.weight.shape().to_vec());
    let mut gb = Tensor::zeros(c.bias.shape().to_vec());
    let mut gx = Tensor::zeros(shape.to_vec());
    let gwd = gw.data_mut();
    let gxd = gx.data_mut();
    {
        let gbd = gb.data_mut();
        for row in gd.chunks_exact(cout) {
            for (b, &g) in gbd.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    for img in 0..n {
        for oh in 0..h {
            for kh in 0..k {
                let ih = oh as isize + kh as isize - pad as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let ih = ih as usize;
                for ow in 0..w {
                    let out_off = ((img * h + oh) * w + ow) * cout;
                    let g_row = &gd[out_off..out_off + cout];
                    for kw in 0..k {
                        let iw = ow as isize + kw as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let iw = iw as usize;
                        let in_off = ((img * h + ih) * w + iw) * cin;
                        let w_off = (kh * k + kw) * cin * cout;
                        for ci in 0..cin {
                            let a = xd[in_off + ci];
                            let w_row = &wd[w_off + ci * cout..w_off + (ci + 1) * cout];
                            let gw_row = &mut gwd[w_off + ci * cout..w_off + (ci + 1) * cout];
                            let mut acc = 0.0;
                            for ((&g, &wv), gw_v) in g_row.iter().zip(w_row).zip(gw_row.iter_mut())
                            {
                                *gw_v += a * g;
                                acc += wv * g;
                            }
                            gxd[in_off + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((gw, gb, gx))
}

fn pool_forward(p: &MaxPool, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape("maxpool input", &[0, 0, 0, 0], shape));
    }
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if h < p.kernel || w < p.kernel {
        return Err(Error::InvalidArgument(format!(
            "maxpool {} does not fit input {:?}",
            p.kernel, shape
        )));
    }
    let oh_n = (h - p.kernel) / p.stride + 1;
    let ow_n = (w - p.kernel) / p.stride + 1;
    let xd = x.data();
    let mut out = Tensor::zeros(vec![n, oh_n, ow_n, c]);
    let od = out.data_mut();
    let mut argmax = vec![0usize; n * oh_n * ow_n * c];
    for img in 0..n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let out_off = ((img * oh_n + oh) * ow_n + ow) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kh in 0..p.kernel {
                        let ih = oh * p.stride + kh;
                        for kw in 0..p.kernel {
                            let iw = ow * p.stride + kw;
                            let idx = ((img * h + ih) * w + iw) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    od[out_off + ch] = best;
                    argmax[out_off + ch] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

fn dense_forward(d: &Dense, x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0);
    let flat = x.len() / n;
    if flat != d.in_features {
        return Err(Error::shape(
            "dense input",
            &[n, d.in_features],
            x.shape(),
        ));
    }
    let mut out = Tensor::zeros(vec![n, d.out_features]);
    let od = out.data_mut();
    for row in od.chunks_exact_mut(d.out_features) {
        row.copy_from_slice(d.bias.data());
    }
    linalg::matmul_nn(x.data(), d.weight.data(), n, flat, d.out_features, od);
    Ok(out)
}

fn dense_backward(d: &Dense, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.dim(0);
    let flat = x.len() / n;
    if grad_out.shape() != [n, d.out_features] {
        return Err(Error::shape(
            "dense grad_out",
            &[n, d.out_features],
            grad_out.shape(),
        ));
    }
    let mut gw = Tensor::zeros(vec![d.in_features, d.out_features]);
    linalg::matmul_tn(
        x.data(),
        grad_out.data(),
        n,
        flat,
        d.out_features,
        gw.data_mut(),
    );
    let mut gb = Tensor::zeros(vec![d.out_features]);
    {
        let gbd = gb.data_mut();
        for row in grad_out.data().chunks_exact(d.out_features) {
            for (b, &g) in gbd.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    let mut gx = Tensor::zeros(x.shape().to_vec());
    linalg::matmul_nt(
        grad_out.data(),
        d.weight.data(),
        n,
        d.out_features,
        flat,
        gx.data_mut(),
    );
    Ok((gw, gb, gx))
}
