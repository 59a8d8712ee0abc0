//! Minimal deterministic neural-network engine.
//!
//! Models are flat layer lists split into a feature extractor and a
//! classifier head at `split_index`; forward/backward can run over any
//! contiguous layer range so callers can compose the two halves around
//! feature-level operations.

mod layers;
mod loss;
mod train;

pub use layers::{Conv2d, Dense, Dropout, Layer, LayerAux, MaxPool, Mode};
pub use loss::{cross_entropy, softmax};
pub use train::{grad_check, lr_schedule};

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    MnistCnn,
    CifarCnn,
    TestMlp,
}

impl ArchPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mnist_cnn" => Ok(ArchPreset::MnistCnn),
            "cifar_cnn" => Ok(ArchPreset::CifarCnn),
            "test_mlp" => Ok(ArchPreset::TestMlp),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture preset `{other}` (expected mnist_cnn, cifar_cnn or test_mlp)"
            ))),
        }
    }
}

/// A named preset plus its input shape and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub preset: ArchPreset,
    /// Per-example input shape, `[H, W, C]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Hidden width, used by the `test_mlp` preset only.
    pub hidden: usize,
}

impl ArchSpec {
    pub fn mnist_cnn() -> Self {
        ArchSpec {
            preset: ArchPreset::MnistCnn,
            input_shape: vec![28, 28, 1],
            classes: 10,
            hidden: 0,
        }
    }

    pub fn cifar_cnn() -> Self {
        ArchSpec {
            preset: ArchPreset::CifarCnn,
            input_shape: vec![32, 32, 3],
            classes: 10,
            hidden: 0,
        }
    }

    pub fn test_mlp(input_shape: &[usize], hidden: usize, classes: usize) -> Self {
        ArchSpec {
            preset: ArchPreset::TestMlp,
            input_shape: input_shape.to_vec(),
            classes,
            hidden,
        }
    }
}

/// Ordered layer list with the extractor/classifier boundary.
///
/// `layers[..split_index]` is the feature extractor, `layers[split_index..]`
/// the classifier head; the composed model is classifier ∘ extractor.
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub split_index: usize,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Per-example shape of the extractor output.
    pub fn extractor_output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers[..self.split_index] {
            shape = layer
                .output_shape(&shape)
                .expect("model layer shapes are validated at construction");
        }
        shape
    }

    /// Channel count the fusion operators act on: the channel axis of a
    /// spatial feature map, or the feature width of a flat one.
    pub fn fusion_channels(&self) -> usize {
        let shape = self.extractor_output_shape();
        *shape.last().expect("extractor output has at least one axis")
    }

    /// True when both models have the same layer structure and parameter
    /// shapes (aggregation compatibility).
    pub fn same_arch(&self, other: &Model) -> bool {
        self.layers.len() == other.layers.len()
            && self.split_index == other.split_index
            && self.input_shape == other.input_shape
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| match (a, b) {
                    (Layer::Conv2d(x), Layer::Conv2d(y)) => x.weight.shape() == y.weight.shape(),
                    (Layer::Dense(x), Layer::Dense(y)) => x.weight.shape() == y.weight.shape(),
                    (Layer::Relu, Layer::Relu) => true,
                    (Layer::MaxPool(x), Layer::MaxPool(y)) => {
                        x.kernel == y.kernel && x.stride == y.stride
                    }
                    (Layer::Dropout(x), Layer::Dropout(y)) => x.rate == y.rate,
                    _ => false,
                })
    }

    /// Visit every parameter tensor in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::Dense(d) => {
                    out.push(&d.weight);
                    out.push(&d.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                _ => {}
            }
        }
        out
    }
}

const DROPOUT_RATE: f64 = 0.5;

/// Build a preset model with deterministic initialization.
///
/// Weights are uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, biases zero.
pub fn build_model(spec: &ArchSpec, rng_seed: u64) -> Result<Model> {
    let mut rng = rng_from(rng_seed, &[]);
    let mut shape = spec.input_shape.clone();
    let mut layers: Vec<Layer> = Vec::new();
    let push = |layers: &mut Vec<Layer>, shape: &mut Vec<usize>, layer: Layer| -> Result<()> {
        *shape = layer.output_shape(shape)?;
        layers.push(layer);
        Ok(())
    };

    let split_index;
    match spec.preset {
        ArchPreset::MnistCnn => {
            if spec.input_shape.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "mnist_cnn expects an [H, W, C] input shape, got {:?}",
                    spec.input_shape
                )));
            }
            let in_ch = shape[2];
            push(&mut layers, &mut shape, conv(5, in_ch, 32, &mut rng))?;
            push(&mut layers, &mut shape, Layer::Relu)?;
            push(&mut layers, &mut shape, Layer::MaxPool(MaxPool { kernel: 2, stride: 2 }))?;
            push(&mut layers, &mut shape, conv(5, 32, 64, &mut rng))?;
            push(&mut layers, &mut shape, Layer::Relu)?;
            push(&mut layers, &mut shape, Layer::MaxPool(MaxPool { kernel: 2, stride: 2 }))?;
            split_index = layers.len();
            let flat = shape.iter().product();
            push(&mut layers, &mut shape, dense(flat, 512, &mut rng))?;
            push(&mut layers, &mut shape, Layer::Relu)?;
            push(&mut layers, &mut shape, Layer::Dropout(Dropout { rate: DROPOUT_RATE }))?;
            push(&mut layers, &mut shape, dense(512, spec.classes, &mut rng))?;
        }
        ArchPreset::CifarCnn => {
            if spec.input_shape.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "cifar_cnn expects an [H, W, C] input shape, got {:?}",
                    spec.input_shape
                )));
            }
            let in_ch = shape[2];
            push(&mut layers, &mut shape, conv(5, in_ch, 64, &mut rng))?;
            push(&mut layers, &mut shape, Layer::Relu)?;
            push(&mut layers, &mut shape, Layer::MaxPool(MaxPool { kernel: 3, stride: 2 }))?;
            push(&mut layers, &mut shape, conv(5, 64, 64, &mut rng))?;
            push(&mut layers, &mut shape, Layer::Relu)?;
            push(&mut layers, &mut shape, Layer::MaxPool(MaxPool { kernel: 3, stride: 2 }))?;
            split_index = layers.len();
            let flat = shape.iter().product();
            push(&mut layers, &mut shape, dense(flat, 384, &mut rng))?;
            push(&mut layers, &mut shape, Layer::Relu)?;
            push(&mut layers, &mut shape, Layer::Dropout(Dropout { rate: DROPOUT_RATE }))?;
            push(&mut layers, &mut shape, dense(384, 192, &mut rng))?;
            push(&mut layers, &mut shape, Layer::Relu)?;
            push(&mut layers, &mut shape, Layer::Dropout(Dropout { rate: DROPOUT_RATE }))?;
            push(&mut layers, &mut shape, dense(192, spec.classes, &mut rng))?;
        }
        ArchPreset::TestMlp => {
            if spec.hidden == 0 {
                return Err(Error::InvalidArgument(
                    "test_mlp needs a nonzero hidden width".into(),
                ));
            }
            let flat = shape.iter().product();
            push(&mut layers, &mut shape, dense(flat, spec.hidden, &mut rng))?;
            push(&mut layers, &mut shape, Layer::Relu)?;
            // extractor = dense + relu, classifier = output projection
            split_index = layers.len();
            push(&mut layers, &mut shape, dense(spec.hidden, spec.classes, &mut rng))?;
        }
    }
    if *shape.last().unwrap() != spec.classes || shape.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "preset wiring produced output shape {:?}, expected [{}]",
            shape, spec.classes
        )));
    }
    Ok(Model {
        layers,
        split_index,
        input_shape: spec.input_shape.clone(),
        classes: spec.classes,
    })
}

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn conv(kernel: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Layer {
    let fan_in = kernel * kernel * cin;
    let weight = Tensor::new(
        vec![kernel, kernel, cin, cout],
        uniform_init(rng, kernel * kernel * cin * cout, fan_in),
    )
    .expect("conv weight shape");
    Layer::Conv2d(Conv2d {
        weight,
        bias: Tensor::zeros(vec![cout]),
        kernel,
        in_channels: cin,
        out_channels: cout,
    })
}

fn dense(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Layer {
    let weight = Tensor::new(
        vec![in_features, out_features],
        uniform_init(rng, in_features * out_features, in_features),
    )
    .expect("dense weight shape");
    Layer::Dense(Dense {
        weight,
        bias: Tensor::zeros(vec![out_features]),
        in_features,
        out_features,
    })
}

/// Everything backward needs about one executed forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    /// Absolute index of the first executed layer.
    pub start: usize,
    steps: Vec<TraceStep>,
    /// Output of the executed range (logits for a full pass).
    pub output: Tensor,
    /// Activation entering `layers[split_index]`; present when the executed
    /// range crosses the extractor/classifier boundary.
    pub extractor_output: Option<Tensor>,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
struct TraceStep {
    input: Tensor,
    aux: LayerAux,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Run `layers[range]` on `input`, threading `rng` through dropout layers.
pub fn forward_range(
    model: &Model,
    range: Range<usize>,
    input: &Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ActivationTrace> {
    if range.end > model.layers.len() || range.start > range.end {
        return Err(Error::InvalidArgument(format!(
            "layer range {range:?} out of bounds for {} layers",
            model.layers.len()
        )));
    }
    let mut x = input.clone();
    let mut steps = Vec::with_capacity(range.len());
    let mut extractor_output = None;
    for i in range.clone() {
        if i == model.split_index && i > range.start {
            extractor_output = Some(x.clone());
        }
        let (y, aux) = layers::layer_forward(&model.layers[i], &x, mode, rng)?;
        steps.push(TraceStep { input: x, aux });
        x = y;
    }
    Ok(ActivationTrace {
        start: range.start,
        steps,
        output: x,
        extractor_output,
        mode,
    })
}

/// Full forward pass; returns logits plus the per-layer trace.
pub fn forward(model: &Model, batch: &Tensor, mode: Mode, rng_seed: u64) -> Result<ActivationTrace> {
    if batch.shape().len() < 2 || batch.shape()[1..] != *model.input_shape {
        let mut expected = vec![0];
        expected.extend_from_slice(&model.input_shape);
        return Err(Error::shape("model input batch", &expected, batch.shape()));
    }
    let mut rng = rng_from(rng_seed, &[]);
    forward_range(model, 0..model.layers.len(), batch, mode, &mut rng)
}

/// Per-layer parameter gradients, aligned with `Model::layers`.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// `(weight, bias)` for parameterized layers covered by the backward
    /// pass, `None` elsewhere.
    pub layers: Vec<Option<(Tensor, Tensor)>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv2d(c) => Some((
                        Tensor::zeros(c.weight.shape().to_vec()),
                        Tensor::zeros(c.bias.shape().to_vec()),
                    )),
                    Layer::Dense(d) => Some((
                        Tensor::zeros(d.weight.shape().to_vec()),
                        Tensor::zeros(d.bias.shape().to_vec()),
                    )),
                    _ => None,
                })
                .collect(),
        }
    }

    /// Flatten to per-parameter-tensor references, matching `Model::params`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for entry in self.layers.iter().flatten() {
            out.push(&entry.0);
            out.push(&entry.1);
        }
        out
    }
}

/// Backward over a previously executed range. Returns parameter gradients and
/// the gradient with respect to the range input.
pub fn backward_range(
    model: &Model,
    trace: &ActivationTrace,
    grad_output: &Tensor,
) -> Result<(Gradients, Tensor)> {
    backward_impl(model, trace, grad_output, None)
}

/// Backward over a full-model trace.
///
/// `extra_grad_at_extractor` is added to the gradient flowing into the
/// extractor output before backpropagation continues into the extractor;
/// feature-level penalty terms enter here.
pub fn backward(
    model: &Model,
    trace: &ActivationTrace,
    grad_logits: &Tensor,
    extra_grad_at_extractor: Option<&Tensor>,
) -> Result<Gradients> {
    if trace.start != 0 || trace.len() != model.layers.len() {
        return Err(Error::InvalidArgument(
            "backward needs a full-model trace; use backward_range for partial passes".into(),
        ));
    }
    let (grads, _) = backward_impl(model, trace, grad_logits, extra_grad_at_extractor)?;
    Ok(grads)
}

fn backward_impl(
    model: &Model,
    trace: &ActivationTrace,
    grad_output: &Tensor,
    extra_grad_at_extractor: Option<&Tensor>,
) -> Result<(Gradients, Tensor)> {
    if grad_output.shape() != trace.output.shape() {
        return Err(Error::shape(
            "grad_output",
            trace.output.shape(),
            grad_output.shape(),
        ));
    }
    let mut grads = Gradients {
        layers: vec![None; model.layers.len()],
    };
    let mut g = grad_output.clone();
    for (offset, step) in trace.steps.iter().enumerate().rev() {
        let i = trace.start + offset;
        let (param_grads, gx) = layers::layer_backward(&model.layers[i], &step.input, &step.aux, &g)?;
        grads.layers[i] = param_grads;
        g = gx;
        if i == model.split_index {
            if let Some(extra) = extra_grad_at_extractor {
                if extra.shape() != g.shape() {
                    return Err(Error::shape(
                        "extra_grad_at_extractor",
                        g.shape(),
                        extra.shape(),
                    ));
                }
                g.add_assign_scaled(extra, 1.0)?;
            }
        }
    }
    Ok((grads, g))
}

/// In-place SGD update: `p -= lr * g` for every covered parameter.
pub fn sgd_step_in_place(model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
    if !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite lr {lr}")));
    }
    if grads.layers.len() != model.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient set covers {} layers, model has {}",
            grads.layers.len(),
            model.layers.len()
        )));
    }
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        let Some((gw, gb)) = g else { continue };
        let (w, b) = match layer {
            Layer::Conv2d(c) => (&mut c.weight, &mut c.bias),
            Layer::Dense(d) => (&mut d.weight, &mut d.bias),
            _ => {
                return Err(Error::InvalidArgument(
                    "gradient present for a layer without parameters".into(),
                ))
            }
        };
        w.add_assign_scaled(gw, -lr)?;
        b.add_assign_scaled(gb, -lr)?;
    }
    Ok(())
}

/// Pure-value SGD step.
pub fn sgd_step(model: &Model, grads: &Gradients, lr: f64) -> Result<Model> {
    let mut next = model.clone();
    sgd_step_in_place(&mut next, grads, lr)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_preset_matches_published_layout() {
        let model = build_model(&ArchSpec::mnist_cnn(), 1).unwrap();
        // first dense layer has 512 units
        let first_dense = model
            .layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d),
                _ => None,
            })
            .unwrap();
        assert_eq!(first_dense.out_features, 512);
        assert_eq!(model.extractor_output_shape(), vec![7, 7, 64]);
        assert_eq!(model.split_index, 6);
    }

    #[test]
    fn cifar_preset_dense_widths() {
        let model = build_model(&ArchSpec::cifar_cnn(), 1).unwrap();
        let widths: Vec<usize> = model
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(d.out_features),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![384, 192, 10]);
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let spec = ArchSpec::test_mlp(&[4, 4, 1], 7, 3);
        let a = build_model(&spec, 42).unwrap();
        let b = build_model(&spec, 42).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = build_model(&spec, 43).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn unknown_preset_name_rejected() {
        assert!(ArchPreset::parse("stratagem_net").is_err());
    }

    #[test]
    fn incompatible_input_shape_rejected() {
        let mut spec = ArchSpec::mnist_cnn();
        spec.input_shape = vec![3, 3, 1]; // too small for two pooling stages
        assert!(build_model(&spec, 1).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let spec = ArchSpec::test_mlp(&[2, 2, 1], 5, 4);
        let mut model = build_model(&spec, 9).unwrap();
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let batch = Tensor::from_fn(vec![3, 2, 2, 1], |i| i as f64 * 0.1);
        let trace = forward(&model, &batch, Mode::Eval, 0).unwrap();
        for row in trace.output.data().chunks_exact(4) {
            for &v in row {
                assert_eq!(v, row[0]);
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = ArchSpec::test_mlp(&[2, 2, 1], 5, 4);
        let model = build_model(&spec, 9).unwrap();
        let batch = Tensor::from_fn(vec![2, 2, 2, 1], |i| (i as f64).sin());
        let a = forward(&model, &batch, Mode::Eval, 1).unwrap();
        let b = forward(&model, &batch, Mode::Eval, 2).unwrap();
        assert_eq!(a.output.data(), b.output.data());
    }

    #[test]
    fn logits_shape_contract() {
        let spec = ArchSpec::test_mlp(&[4], 6, 3);
        let model = build_model(&spec, 5).unwrap();
        let batch = Tensor::from_fn(vec![2, 4], |i| i as f64);
        let trace = forward(&model, &batch, Mode::Eval, 0).unwrap();
        assert_eq!(trace.output.shape(), &[2, 3]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = rng_from(3, &[]);
        let layer = Layer::Dropout(Dropout { rate: 0.5 });
        let x = Tensor::from_fn(vec![2, 8], |i| i as f64);
        let (y, _) = layers::layer_forward(&layer, &x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn sgd_step_arithmetic_and_identity() {
        let spec = ArchSpec::test_mlp(&[1], 1, 2);
        let mut model = build_model(&spec, 0).unwrap();
        // set a single known parameter
        model.params_mut()[0].data_mut()[0] = 1.0;
        let mut grads = Gradients::zeros_like(&model);
        grads.layers[0].as_mut().unwrap().0.data_mut()[0] = 0.5;

        let stepped = sgd_step(&model, &grads, 0.1).unwrap();
        assert!((stepped.params()[0].data()[0] - 0.95).abs() < 1e-15);

        let frozen = sgd_step(&model, &grads, 0.0).unwrap();
        for (a, b) in frozen.params().iter().zip(model.params().iter()) {
            assert_eq!(a.data(), b.data());
        }

        // two successive steps equal one step with summed update
        let twice = sgd_step(&sgd_step(&model, &grads, 0.1).unwrap(), &grads, 0.2).unwrap();
        let once = sgd_step(&model, &grads, 0.3).unwrap();
        for (a, b) in twice.params().iter().zip(once.params().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }

        assert!(sgd_step(&model, &grads, f64::NAN).is_err());
    }

    #[test]
    fn extra_extractor_grad_equals_pure_feature_backprop() {
        let spec = ArchSpec::test_mlp(&[3], 4, 2);
        let model = build_model(&spec, 11).unwrap();
        let batch = Tensor::from_fn(vec![2, 3], |i| 0.3 * i as f64 - 0.2);
        let trace = forward(&model, &batch, Mode::Train, 7).unwrap();

        let zero_logits = Tensor::zeros(trace.output.shape().to_vec());
        let extra = Tensor::from_fn(
            trace.extractor_output.as_ref().unwrap().shape().to_vec(),
            |i| 0.1 * (i as f64 + 1.0),
        );
        let with_hook = backward(&model, &trace, &zero_logits, Some(&extra)).unwrap();

        // same gradient via an extractor-only pass
        let mut rng = rng_from(7, &[]);
        let ex_trace = forward_range(&model, 0..model.split_index, &batch, Mode::Train, &mut rng).unwrap();
        let (direct, _) = backward_range(&model, &ex_trace, &extra).unwrap();

        for i in 0..model.split_index {
            match (&with_hook.layers[i], &direct.layers[i]) {
                (Some((aw, ab)), Some((bw, bb))) => {
                    assert_eq!(aw.data(), bw.data());
                    assert_eq!(ab.data(), bb.data());
                }
                (None, None) => {}
                _ => panic!("gradient layout mismatch"),
            }
        }
        // classifier gradients are zero under zero logits gradient
        for entry in with_hook.layers[model.split_index..].iter().flatten() {
            assert!(entry.0.data().iter().all(|&v| v == 0.0));
            assert!(entry.1.data().iter().all(|&v| v == 0.0));
        }
    }
}
