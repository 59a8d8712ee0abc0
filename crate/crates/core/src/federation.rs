//! Synchronous federated training: client sampling, local update strategies,
//! size-weighted aggregation, and evaluation.
//!
//! Strategies:
//! - `FedAvg`: plain local SGD on the classification loss.
//! - `FedMmd`: two-stream training; the round-start global model runs frozen
//!   in eval mode alongside the local model, and an MMD (or L2) penalty on
//!   the two streams' outputs pulls the local model toward it.
//! - `FedFusion`: the frozen global extractor's feature maps are fused with
//!   the local extractor's through a learned fusion operator; extractor,
//!   fusion and classifier all train locally and aggregate per round.
//!
//! Per-round client updates are independent and run in parallel; every
//! random choice is keyed by (seed, round, client, epoch, batch), so results
//! do not depend on scheduling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{
    aggregate_fusion, constrain, fuse_backward_batch, fuse_forward_batch, fusion_sgd_step,
    FusionOperator, FusionVariant,
};
use crate::mmd::{l2_output_penalty, median_heuristic, mmd_grad, mmd_sq, KernelBank};
use crate::nn::{
    backward, backward_range, cross_entropy, forward_range, lr_schedule, sgd_step_in_place,
    Gradients, Mode, Model,
};
use crate::rng::{mix_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// One batch per epoch holding the client's whole dataset.
    Full,
    Fixed(usize),
}

impl BatchSize {
    fn resolve(&self, n: usize) -> usize {
        match self {
            BatchSize::Full => n,
            BatchSize::Fixed(b) => (*b).min(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    Mmd,
    L2,
}

/// Which model outputs the two-stream penalty compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyTarget {
    /// Pre-softmax logits (default).
    Logits,
    /// Extractor-output feature maps, injected through the backward hook.
    Features,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    FedAvg,
    FedMmd {
        penalty: Penalty,
        lambda: f64,
        target: PenaltyTarget,
    },
    FedFusion {
        variant: FusionVariant,
        ema_beta: f64,
        /// Diagnostic mode: fix every blend weight to this value and exclude
        /// fusion parameters from optimization.
        pin_lambda: Option<f64>,
        /// Compute the frozen global feature maps once per round instead of
        /// per batch (identical results, less work).
        cache_global_features: bool,
    },
}

impl Strategy {
    pub fn fedfusion(variant: FusionVariant, ema_beta: f64) -> Self {
        Strategy::FedFusion {
            variant,
            ema_beta,
            pin_lambda: None,
            cache_global_features: true,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Strategy::FedAvg => "fedavg".into(),
            Strategy::FedMmd { penalty, .. } => match penalty {
                Penalty::Mmd => "fedmmd_mmd".into(),
                Penalty::L2 => "fedmmd_l2".into(),
            },
            Strategy::FedFusion { variant, .. } => match variant {
                FusionVariant::Conv => "fedfusion_conv".into(),
                FusionVariant::Multi => "fedfusion_multi".into(),
                FusionVariant::Single => "fedfusion_single".into(),
            },
        }
    }
}

/// Local-training knobs shared by all strategies.
#[derive(Debug, Clone, Copy)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: BatchSize,
}

#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub clients: usize,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: BatchSize,
    pub rounds: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub strategy: Strategy,
    pub seed: u64,
    /// Evaluate (and record metrics) every n-th round; the final round is
    /// always recorded.
    pub eval_cadence: usize,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidArgument("client count must be positive".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "client fraction {} outside (0, 1]",
                self.client_fraction
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::InvalidArgument("local epochs must be >= 1".into()));
        }
        if let BatchSize::Fixed(0) = self.batch_size {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.eval_cadence == 0 {
            return Err(Error::InvalidArgument("eval cadence must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::InvalidArgument(format!("base lr {} must be positive", self.base_lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lr decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        match &self.strategy {
            Strategy::FedMmd { lambda, .. } => {
                if !(*lambda >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "penalty weight {lambda} must be >= 0"
                    )));
                }
            }
            Strategy::FedFusion { ema_beta, .. } => {
                if !(0.0..1.0).contains(ema_beta) {
                    return Err(Error::InvalidArgument(format!(
                        "ema beta {ema_beta} outside [0, 1)"
                    )));
                }
            }
            Strategy::FedAvg => {}
        }
        Ok(())
    }

    fn local(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
        }
    }
}

/// One communication round's record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based communication-round count.
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub mean_train_loss: f64,
    pub lr: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_seconds: f64,
}

/// A client's round result.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub model: Model,
    pub fusion: Option<FusionOperator>,
    pub mean_train_loss: f64,
}

/// Output of a full federation run.
#[derive(Debug, Clone)]
pub struct FederationRun {
    pub metrics: Vec<RoundMetrics>,
    pub model: Model,
    pub fusion: Option<FusionOperator>,
}

/// Uniform sample without replacement of `max(1, round(fraction * k))`
/// client ids, returned sorted.
pub fn sample_clients(k: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = ((fraction * k as f64).round() as usize).clamp(1, k);
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(rng);
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

/// Size-weighted parameter mean: every parameter is `sum(n_t * p_t) / sum(n_t)`.
pub fn aggregate_weighted(models: &[Model], sizes: &[usize]) -> Result<Model> {
    if models.is_empty() || models.len() != sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models with {} sizes",
            models.len(),
            sizes.len()
        )));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument("client sizes must be positive".into()));
    }
    for m in &models[1..] {
        if !models[0].same_arch(m) {
            return Err(Error::InvalidArgument("architecture mismatch in aggregation".into()));
        }
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let mut out = models[0].clone();
    for p in out.params_mut() {
        for v in p.data_mut() {
            *v = 0.0;
        }
    }
    for (model, &n) in models.iter().zip(sizes) {
        let w = n as f64 / total;
        let mut acc = out.params_mut();
        for (dst, src) in acc.iter_mut().zip(model.params()) {
            dst.add_assign_scaled(src, w)?;
        }
    }
    Ok(out)
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Plain FedAvg local update: `epochs` of minibatch SGD on cross-entropy.
pub fn client_update_fedavg(
    global: &Model,
    data: &ClientDataset,
    local: &LocalConfig,
    lr: f64,
    seed: u64,
) -> Result<ClientUpdate> {
    if data.n() == 0 {
        return Err(Error::EmptyInput(format!("client {} has no data", data.id)));
    }
    let mut model = global.clone();
    let batch = local.batch_size.resolve(data.n());
    let mut loss_sum = 0.0;
    let mut example_count = 0usize;
    for epoch in 0..local.epochs {
        let chunks = shuffled_batches(data.n(), batch, &mut rng_from(seed, &[20, epoch as u64]));
        for (bi, chunk) in chunks.iter().enumerate() {
            let sub = data.data.subset(chunk);
            let mut rng = rng_from(seed, &[21, epoch as u64, bi as u64]);
            let trace = forward_range(&model, 0..model.layers.len(), &sub.images, Mode::Train, &mut rng)?;
            let (loss, grad_logits) = cross_entropy(&trace.output, &sub.labels)?;
            let grads = backward(&model, &trace, &grad_logits, None)?;
            sgd_step_in_place(&mut model, &grads, lr)?;
            loss_sum += loss * chunk.len() as f64;
            example_count += chunk.len();
        }
    }
    Ok(ClientUpdate {
        model,
        fusion: None,
        mean_train_loss: loss_sum / example_count as f64,
    })
}

/// Two-stream local update: classification loss plus `lambda` times a
/// discrepancy penalty between the frozen global stream's outputs and the
/// local stream's on each batch.
///
/// With `lambda == 0` the trajectory is bit-identical to
/// `client_update_fedavg` under the same seed.
#[allow(clippy::too_many_arguments)]
pub fn client_update_fedmmd(
    global: &Model,
    data: &ClientDataset,
    local: &LocalConfig,
    lr: f64,
    lambda: f64,
    penalty: Penalty,
    target: PenaltyTarget,
    seed: u64,
) -> Result<ClientUpdate> {
    local_train_fedmmd(global, global, data, local, lr, lambda, penalty, target, seed)
}

/// `client_update_fedmmd` with the trainable model initialized from `init`
/// while `reference` supplies the frozen stream; lets callers continue
/// fine-tuning against a fixed reference across epochs.
#[allow(clippy::too_many_arguments)]
pub fn local_train_fedmmd(
    init: &Model,
    reference: &Model,
    data: &ClientDataset,
    local: &LocalConfig,
    lr: f64,
    lambda: f64,
    penalty: Penalty,
    target: PenaltyTarget,
    seed: u64,
) -> Result<ClientUpdate> {
    if data.n() == 0 {
        return Err(Error::EmptyInput(format!("client {} has no data", data.id)));
    }
    let global = reference;
    let mut model = init.clone();
    let batch = local.batch_size.resolve(data.n());
    let mut loss_sum = 0.0;
    let mut example_count = 0usize;
    // RBF widths are fit on the first batch of the round, then frozen
    let mut bank: Option<KernelBank> = None;
    for epoch in 0..local.epochs {
        let chunks = shuffled_batches(data.n(), batch, &mut rng_from(seed, &[20, epoch as u64]));
        for (bi, chunk) in chunks.iter().enumerate() {
            let sub = data.data.subset(chunk);
            let mut rng = rng_from(seed, &[21, epoch as u64, bi as u64]);
            let trace = forward_range(&model, 0..model.layers.len(), &sub.images, Mode::Train, &mut rng)?;
            let (cls_loss, mut grad_logits) = cross_entropy(&trace.output, &sub.labels)?;
            let mut total_loss = cls_loss;
            let mut extra_grad: Option<Tensor> = None;
            if lambda > 0.0 {
                let mut g_rng = rng_from(seed, &[22, epoch as u64, bi as u64]);
                let g_trace =
                    forward_range(global, 0..global.layers.len(), &sub.images, Mode::Eval, &mut g_rng)?;
                let (x_global, y_local, feat_shape) = match target {
                    PenaltyTarget::Logits => (g_trace.output.clone(), trace.output.clone(), None),
                    PenaltyTarget::Features => {
                        let fg = g_trace
                            .extractor_output
                            .clone()
                            .expect("full forward records the extractor output");
                        let fl = trace
                            .extractor_output
                            .clone()
                            .expect("full forward records the extractor output");
                        let shape = fl.shape().to_vec();
                        let rows = shape[0];
                        let cols = fl.len() / rows;
                        (
                            fg.reshape(vec![rows, cols])?,
                            fl.reshape(vec![rows, cols])?,
                            Some(shape),
                        )
                    }
                };
                let (value, grad) = match penalty {
                    Penalty::Mmd => {
                        let bank = match &bank {
                            Some(b) => b,
                            None => {
                                let b = match median_heuristic(&x_global, &y_local) {
                                    Ok(sigma) => KernelBank::median_scaled(sigma)?,
                                    Err(Error::Degenerate(_)) => KernelBank::single(1.0)?,
                                    Err(e) => return Err(e),
                                };
                                bank.insert(b)
                            }
                        };
                        (mmd_sq(&x_global, &y_local, bank)?, mmd_grad(&x_global, &y_local, bank)?)
                    }
                    Penalty::L2 => l2_output_penalty(&x_global, &y_local)?,
                };
                total_loss += lambda * value;
                match feat_shape {
                    None => grad_logits.add_assign_scaled(&grad, lambda)?,
                    Some(shape) => extra_grad = Some(grad.scale(lambda).reshape(shape)?),
                }
            }
            let grads = backward(&model, &trace, &grad_logits, extra_grad.as_ref())?;
            sgd_step_in_place(&mut model, &grads, lr)?;
            loss_sum += total_loss * chunk.len() as f64;
            example_count += chunk.len();
        }
    }
    Ok(ClientUpdate {
        model,
        fusion: None,
        mean_train_loss: loss_sum / example_count as f64,
    })
}

/// Feature-fusion local update: the classifier consumes the fusion of the
/// trainable local extractor's map with the frozen global extractor's map;
/// extractor, fusion parameters and classifier are all updated, blend
/// weights are clamped to `[0, 1]` after each step.
#[allow(clippy::too_many_arguments)]
pub fn client_update_fedfusion(
    global: &Model,
    global_fusion: &FusionOperator,
    data: &ClientDataset,
    local: &LocalConfig,
    lr: f64,
    pin_lambda: Option<f64>,
    cache_global_features: bool,
    seed: u64,
) -> Result<ClientUpdate> {
    local_train_fedfusion(
        global,
        global_fusion,
        global,
        data,
        local,
        lr,
        pin_lambda,
        cache_global_features,
        seed,
    )
}

/// `client_update_fedfusion` with the trainable model and operator starting
/// from `init`/`init_fusion` while `reference` supplies the frozen global
/// extractor stream.
#[allow(clippy::too_many_arguments)]
pub fn local_train_fedfusion(
    init: &Model,
    init_fusion: &FusionOperator,
    reference: &Model,
    data: &ClientDataset,
    local: &LocalConfig,
    lr: f64,
    pin_lambda: Option<f64>,
    cache_global_features: bool,
    seed: u64,
) -> Result<ClientUpdate> {
    if data.n() == 0 {
        return Err(Error::EmptyInput(format!("client {} has no data", data.id)));
    }
    let global = reference;
    let global_fusion = init_fusion;
    let feat_shape = global.extractor_output_shape();
    let channels = global.fusion_channels();
    if let Some(c) = global_fusion.channels() {
        if c != channels {
            return Err(Error::InvalidArgument(format!(
                "fusion operator sized for {c} channels, extractor yields {channels}"
            )));
        }
    }
    let mut model = init.clone();
    let mut op = match pin_lambda {
        None => global_fusion.clone(),
        Some(v) => pin_operator(global_fusion, v)?,
    };
    let split = model.split_index;
    let n_layers = model.layers.len();
    let batch = local.batch_size.resolve(data.n());

    // The global stream is frozen and deterministic, so its feature maps can
    // be computed once per round and reused across epochs.
    let cached: Option<Tensor> = if cache_global_features {
        let mut g_rng = rng_from(seed, &[23]);
        Some(forward_range(global, 0..split, &data.data.images, Mode::Eval, &mut g_rng)?.output)
    } else {
        None
    };

    let mut loss_sum = 0.0;
    let mut example_count = 0usize;
    for epoch in 0..local.epochs {
        let chunks = shuffled_batches(data.n(), batch, &mut rng_from(seed, &[20, epoch as u64]));
        for (bi, chunk) in chunks.iter().enumerate() {
            let sub = data.data.subset(chunk);
            let mut rng = rng_from(seed, &[21, epoch as u64, bi as u64]);
            let ex_trace = forward_range(&model, 0..split, &sub.images, Mode::Train, &mut rng)?;
            let fg_minor = match &cached {
                Some(all) => gather_rows(all, chunk),
                None => {
                    let mut g_rng = rng_from(seed, &[22, epoch as u64, bi as u64]);
                    forward_range(global, 0..split, &sub.images, Mode::Eval, &mut g_rng)?.output
                }
            };
            let fg = to_channel_major(&fg_minor, &feat_shape)?;
            let fl = to_channel_major(&ex_trace.output, &feat_shape)?;
            let fused = fuse_forward_batch(&op, &fg, &fl)?;
            let fused_minor = to_channel_minor(&fused, &feat_shape)?;
            // classifier continues on the same rng stream the extractor used
            let cls_trace = forward_range(&model, split..n_layers, &fused_minor, Mode::Train, &mut rng)?;
            let (loss, grad_logits) = cross_entropy(&cls_trace.output, &sub.labels)?;
            let (cls_grads, grad_fused_minor) = backward_range(&model, &cls_trace, &grad_logits)?;
            let grad_fused = to_channel_major(&grad_fused_minor, &feat_shape)?;
            let (grad_fl, op_grads) = fuse_backward_batch(&op, &fg, &fl, &grad_fused)?;
            let grad_fl_minor = to_channel_minor(&grad_fl, &feat_shape)?;
            let (ex_grads, _) = backward_range(&model, &ex_trace, &grad_fl_minor)?;

            let merged = merge_gradients(ex_grads, cls_grads);
            sgd_step_in_place(&mut model, &merged, lr)?;
            if pin_lambda.is_none() {
                fusion_sgd_step(&mut op, &op_grads, lr)?;
                op = constrain(op);
            }
            loss_sum += loss * chunk.len() as f64;
            example_count += chunk.len();
        }
    }
    Ok(ClientUpdate {
        model,
        fusion: Some(op),
        mean_train_loss: loss_sum / example_count as f64,
    })
}

fn pin_operator(op: &FusionOperator, value: f64) -> Result<FusionOperator> {
    match op {
        FusionOperator::Single { .. } => Ok(FusionOperator::Single { lambda: value }),
        FusionOperator::Multi { lambda } => Ok(FusionOperator::Multi {
            lambda: Tensor::filled(vec![lambda.len()], value),
        }),
        FusionOperator::Conv { .. } => Err(Error::InvalidArgument(
            "pin_lambda applies to blend operators, not conv".into(),
        )),
    }
}

fn merge_gradients(a: Gradients, b: Gradients) -> Gradients {
    Gradients {
        layers: a
            .layers
            .into_iter()
            .zip(b.layers)
            .map(|(x, y)| x.or(y))
            .collect(),
    }
}

fn gather_rows(all: &Tensor, indices: &[usize]) -> Tensor {
    let per = all.len() / all.dim(0);
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(all.row(i));
    }
    let mut shape = all.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).expect("gathered rows shape")
}

/// `[N, H, W, C]` -> `[N, C, H, W]`; flat `[N, F]` maps are already
/// channel-major (one spatial position) and pass through unchanged.
fn to_channel_major(t: &Tensor, feat_shape: &[usize]) -> Result<Tensor> {
    match feat_shape.len() {
        1 => Ok(t.clone()),
        3 => {
            let (n, h, w, c) = (t.dim(0), feat_shape[0], feat_shape[1], feat_shape[2]);
            let src = t.data();
            let mut data = vec![0.0f64; src.len()];
            let hw = h * w;
            for img in 0..n {
                let base = img * hw * c;
                for p in 0..hw {
                    for ch in 0..c {
                        data[base + ch * hw + p] = src[base + p * c + ch];
                    }
                }
            }
            Tensor::new(vec![n, c, h, w], data)
        }
        other => Err(Error::InvalidArgument(format!(
            "unsupported extractor output rank {other}"
        ))),
    }
}

fn to_channel_minor(t: &Tensor, feat_shape: &[usize]) -> Result<Tensor> {
    match feat_shape.len() {
        1 => Ok(t.clone()),
        3 => {
            let (n, h, w, c) = (t.dim(0), feat_shape[0], feat_shape[1], feat_shape[2]);
            let src = t.data();
            let mut data = vec![0.0f64; src.len()];
            let hw = h * w;
            for img in 0..n {
                let base = img * hw * c;
                for ch in 0..c {
                    for p in 0..hw {
                        data[base + p * c + ch] = src[base + ch * hw + p];
                    }
                }
            }
            Tensor::new(vec![n, h, w, c], data)
        }
        other => Err(Error::InvalidArgument(format!(
            "unsupported extractor output rank {other}"
        ))),
    }
}

/// Eval-mode accuracy and mean loss. For fusion runs, the deployed model
/// feeds the single global extractor into both fusion inputs (no local
/// extractor exists server-side).
pub fn evaluate(model: &Model, fusion: Option<&FusionOperator>, test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::EmptyInput("empty test set".into()));
    }
    let feat_shape = model.extractor_output_shape();
    let n_layers = model.layers.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let chunk_size = 512usize;
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(chunk_size) {
        let sub = test.subset(chunk);
        let mut rng = rng_from(0, &[]);
        let logits = match fusion {
            None => {
                forward_range(model, 0..n_layers, &sub.images, Mode::Eval, &mut rng)?.output
            }
            Some(op) => {
                let feats =
                    forward_range(model, 0..model.split_index, &sub.images, Mode::Eval, &mut rng)?
                        .output;
                let major = to_channel_major(&feats, &feat_shape)?;
                let fused = fuse_forward_batch(op, &major, &major)?;
                let fused_minor = to_channel_minor(&fused, &feat_shape)?;
                forward_range(model, model.split_index..n_layers, &fused_minor, Mode::Eval, &mut rng)?
                    .output
            }
        };
        let (loss, _) = cross_entropy(&logits, &sub.labels)?;
        loss_sum += loss * chunk.len() as f64;
        let k = logits.len() / chunk.len();
        for (row, &label) in logits.data().chunks_exact(k).zip(&sub.labels) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok((
        correct as f64 / test.len() as f64,
        loss_sum / test.len() as f64,
    ))
}

/// Execute `cfg.rounds` communication rounds over the client partitions.
///
/// Each round: sample clients, run the strategy's local update on each in
/// parallel, aggregate size-weighted, evaluate on `test`. Byte counters
/// assume full-precision parameter exchange both ways per participant.
pub fn run_federation(
    cfg: &FederationConfig,
    initial: Model,
    partitions: &[ClientDataset],
    test: &Dataset,
) -> Result<FederationRun> {
    cfg.validate()?;
    if partitions.len() != cfg.clients {
        return Err(Error::InvalidArgument(format!(
            "config expects {} clients, got {} partitions",
            cfg.clients,
            partitions.len()
        )));
    }
    if let Some(empty) = partitions.iter().find(|p| p.n() == 0) {
        return Err(Error::EmptyInput(format!("client {} has no data", empty.id)));
    }

    let mut model = initial;
    let mut fusion: Option<FusionOperator> = match &cfg.strategy {
        Strategy::FedFusion { variant, pin_lambda, .. } => {
            let neutral = FusionOperator::neutral(*variant, model.fusion_channels());
            Some(match pin_lambda {
                None => neutral,
                Some(v) => pin_operator(&neutral, *v)?,
            })
        }
        _ => None,
    };

    let local = cfg.local();
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let lr = lr_schedule(cfg.base_lr, cfg.lr_decay, round);
        let mut round_rng = rng_from(cfg.seed, &[30, round as u64]);
        let selected = sample_clients(cfg.clients, cfg.client_fraction, &mut round_rng);

        let updates: Vec<ClientUpdate> = selected
            .par_iter()
            .map(|&t| {
                let client_seed = mix_seed(cfg.seed, &[31, round as u64, t as u64]);
                match &cfg.strategy {
                    Strategy::FedAvg => {
                        client_update_fedavg(&model, &partitions[t], &local, lr, client_seed)
                    }
                    Strategy::FedMmd { penalty, lambda, target } => client_update_fedmmd(
                        &model,
                        &partitions[t],
                        &local,
                        lr,
                        *lambda,
                        *penalty,
                        *target,
                        client_seed,
                    ),
                    Strategy::FedFusion { pin_lambda, cache_global_features, .. } => {
                        client_update_fedfusion(
                            &model,
                            fusion.as_ref().expect("fusion state exists for fedfusion"),
                            &partitions[t],
                            &local,
                            lr,
                            *pin_lambda,
                            *cache_global_features,
                            client_seed,
                        )
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let sizes: Vec<usize> = selected.iter().map(|&t| partitions[t].n()).collect();
        let total: f64 = sizes.iter().map(|&n| n as f64).sum();
        let models: Vec<Model> = updates.iter().map(|u| u.model.clone()).collect();
        model = aggregate_weighted(&models, &sizes)?;
        if let Strategy::FedFusion { ema_beta, .. } = &cfg.strategy {
            let ops: Vec<FusionOperator> = updates
                .iter()
                .map(|u| u.fusion.clone().expect("fusion clients return an operator"))
                .collect();
            let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total).collect();
            fusion = Some(aggregate_fusion(
                &ops,
                &weights,
                fusion.as_ref().expect("fusion state exists"),
                *ema_beta,
            )?);
        }

        let is_final = round + 1 == cfg.rounds;
        if (round + 1) % cfg.eval_cadence == 0 || is_final {
            let (test_accuracy, test_loss) = evaluate(&model, fusion.as_ref(), test)?;
            let mean_train_loss = updates
                .iter()
                .zip(&sizes)
                .map(|(u, &n)| u.mean_train_loss * n as f64)
                .sum::<f64>()
                / total;
            let param_count = model.param_count() + fusion.as_ref().map_or(0, |f| f.param_count());
            let dir_bytes = (selected.len() * param_count * 8) as u64;
            metrics.push(RoundMetrics {
                round: round + 1,
                test_accuracy,
                test_loss,
                mean_train_loss,
                lr,
                bytes_up: dir_bytes,
                bytes_down: dir_bytes,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(FederationRun { metrics, model, fusion })
}
