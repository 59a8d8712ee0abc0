//! Experiment execution: dataset preparation, per-seed federation runs,
//! metric emission, and the newly-incoming-client probe.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use fedsim_core::data::{
    apply_pixel_permutation, load_cifar_binary, load_idx, partition_class_split, partition_iid,
    partition_permuted, partition_shards, synthetic_blobs, ClientDataset, Dataset,
};
use fedsim_core::federation::{
    client_update_fedavg, evaluate, local_train_fedfusion, local_train_fedmmd, run_federation,
    BatchSize, FederationConfig, FederationRun, LocalConfig, RoundMetrics, Strategy,
};
use fedsim_core::fusion::{fuse_forward_batch, FusionOperator};
use fedsim_core::nn::{build_model, cross_entropy, forward_range, Mode, Model};
use fedsim_core::rng::{mix_seed, rng_from};

use crate::analysis::rounds_to_milestone_values;
use crate::config::{DatasetSpec, ExperimentConfig, PartitionSpec, RawConfig};
use crate::error::{CliError, Result};

pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub model: Model,
    pub fusion: Option<FusionOperator>,
    /// (milestone, first round reaching it)
    pub milestones: Vec<(f64, Option<usize>)>,
    pub new_client: Option<NewClientOutcome>,
}

pub struct ExperimentOutput {
    pub run_dir: PathBuf,
    pub runs: Vec<SeedRun>,
}

/// Generate or load the train/test datasets for one seed.
pub fn build_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { n, test_n, shape, classes, noise, clusters_per_class } => {
            // one draw for train and test so both share the class means; with
            // multiple clusters per class, cluster k carries label k % classes
            let total = n + test_n;
            let groups = classes * clusters_per_class;
            let base = total / groups;
            let extra = total % groups;
            let counts: Vec<usize> = (0..groups).map(|g| base + usize::from(g < extra)).collect();
            let mut all = synthetic_blobs(&counts, shape, *noise, mix_seed(seed, &[100]))?;
            if *clusters_per_class > 1 {
                let labels: Vec<usize> = all.labels.iter().map(|&l| l % classes).collect();
                all = Dataset::new(all.images, labels, *classes)?;
            }
            let train_idx: Vec<usize> = (0..*n).collect();
            let test_idx: Vec<usize> = (*n..total).collect();
            Ok((all.subset(&train_idx), all.subset(&test_idx)))
        }
        DatasetSpec::Mnist { train_images, train_labels, test_images, test_labels } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            Ok((train, test))
        }
        DatasetSpec::Cifar10 { train_files, test_files } => {
            let train = load_cifar_binary(train_files)?;
            let test = load_cifar_binary(test_files)?;
            Ok((train, test))
        }
    }
}

pub fn build_partitions(
    cfg: &ExperimentConfig,
    train: &Dataset,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    let part_seed = mix_seed(seed, &[102]);
    let clients = match &cfg.partition {
        PartitionSpec::Iid { clients } => partition_iid(train, *clients, part_seed)?,
        PartitionSpec::Shards { num_shards, shard_size, shards_per_client } => {
            partition_shards(train, *num_shards, *shard_size, *shards_per_client, part_seed)?
        }
        PartitionSpec::ClassSplit { groups } => partition_class_split(train, groups)?,
        PartitionSpec::Permuted { clients, per_client, .. } => {
            partition_permuted(train, *clients, *per_client, part_seed)?
        }
    };
    Ok(clients)
}

/// The evaluation set: for permuted partitions, the union of per-client
/// permuted test slices; otherwise the test set as loaded.
pub fn build_eval_set(
    cfg: &ExperimentConfig,
    clients: &[ClientDataset],
    test: &Dataset,
    seed: u64,
) -> Result<Dataset> {
    match &cfg.partition {
        PartitionSpec::Permuted { test_per_client, .. } => {
            if clients.len() * test_per_client > test.len() {
                return Err(CliError::Config(format!(
                    "[partition].test_per_client {} x {} clients exceeds the {} test examples",
                    test_per_client,
                    clients.len(),
                    test.len()
                )));
            }
            let mut order: Vec<usize> = (0..test.len()).collect();
            order.shuffle(&mut rng_from(seed, &[103]));
            let mut parts = Vec::with_capacity(clients.len());
            for (i, c) in clients.iter().enumerate() {
                let slice = &order[i * test_per_client..(i + 1) * test_per_client];
                let base = test.subset(slice);
                let perm = c
                    .pixel_perm
                    .as_ref()
                    .expect("permuted partition records a permutation");
                parts.push(apply_pixel_permutation(&base, perm)?);
            }
            let refs: Vec<&Dataset> = parts.iter().collect();
            Ok(Dataset::concat(&refs)?)
        }
        _ => Ok(test.clone()),
    }
}

fn federation_config(cfg: &ExperimentConfig, clients: usize, seed: u64) -> FederationConfig {
    FederationConfig {
        clients,
        client_fraction: cfg.client_fraction,
        local_epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        rounds: cfg.rounds,
        base_lr: cfg.base_lr,
        lr_decay: cfg.lr_decay,
        strategy: cfg.strategy.clone(),
        seed,
        eval_cadence: cfg.eval_cadence,
    }
}

/// Run one seed end to end (no file output).
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let (train, test) = build_datasets(cfg, seed)?;
    let clients = build_partitions(cfg, &train, seed)?;
    let eval_set = build_eval_set(cfg, &clients, &test, seed)?;
    let model = build_model(&cfg.arch, mix_seed(seed, &[104])).map_err(CliError::from)?;
    let fed_cfg = federation_config(cfg, clients.len(), seed);
    let FederationRun { metrics, model, fusion } =
        run_federation(&fed_cfg, model, &clients, &eval_set)?;

    let milestones = cfg
        .milestones
        .iter()
        .map(|&m| (m, rounds_to_milestone_values(&metrics, m)))
        .collect();

    let new_client = match &cfg.new_client_probe {
        None => None,
        Some(probe) => {
            let data = new_client_dataset(cfg, &test, clients.len(), probe.n, seed)?;
            let rule = PlateauRule { min_delta: probe.plateau_delta, window: probe.plateau_window };
            Some(new_client_convergence(
                &cfg.strategy,
                &model,
                fusion.as_ref(),
                &data,
                cfg.batch_size,
                cfg.base_lr,
                probe.max_epochs,
                &rule,
                mix_seed(seed, &[105]),
            )?)
        }
    };

    Ok(SeedRun { seed, metrics, model, fusion, milestones, new_client })
}

/// A fresh client for the generalization probe, drawn from the held-out
/// evaluation pool (disjoint from every training client); permuted setups
/// give it a brand-new pixel permutation.
pub fn new_client_dataset(
    cfg: &ExperimentConfig,
    test: &Dataset,
    existing_clients: usize,
    n: usize,
    seed: u64,
) -> Result<ClientDataset> {
    if n > test.len() {
        return Err(CliError::Config(format!(
            "[evaluation].new_client_n {n} exceeds the {} held-out examples",
            test.len()
        )));
    }
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut rng_from(seed, &[106]));
    let base = test.subset(&order[..n]);
    match &cfg.partition {
        PartitionSpec::Permuted { .. } => {
            let shape = base.example_shape();
            let pixels: usize = shape[..shape.len() - 1].iter().product();
            let mut perm: Vec<usize> = (0..pixels).collect();
            perm.shuffle(&mut rng_from(seed, &[107]));
            let data = apply_pixel_permutation(&base, &perm)?;
            Ok(ClientDataset { id: existing_clients, data, pixel_perm: Some(perm) })
        }
        _ => Ok(ClientDataset { id: existing_clients, data: base, pixel_perm: None }),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PlateauRule {
    /// Validation-accuracy improvement below this is a plateau epoch.
    pub min_delta: f64,
    /// Consecutive plateau epochs needed to declare convergence.
    pub window: usize,
}

impl Default for PlateauRule {
    fn default() -> Self {
        PlateauRule { min_delta: 0.001, window: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewClientOutcome {
    /// Epochs run until the plateau was confirmed (or `max_epochs`).
    pub epochs: usize,
    pub converged: bool,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
}

/// Fine-tune the deployed model on a newly joining client with the same
/// client-update rule the strategy uses, one epoch at a time, until
/// validation accuracy stops improving by more than `rule.min_delta` for
/// `rule.window` consecutive epochs. A 20% validation split is reserved
/// internally.
#[allow(clippy::too_many_arguments)]
pub fn new_client_convergence(
    strategy: &Strategy,
    global: &Model,
    fusion: Option<&FusionOperator>,
    new_client: &ClientDataset,
    batch_size: BatchSize,
    lr: f64,
    max_epochs: usize,
    rule: &PlateauRule,
    seed: u64,
) -> Result<NewClientOutcome> {
    if new_client.n() < 5 {
        return Err(CliError::Data(format!(
            "new client needs at least 5 examples for an 80/20 split, has {}",
            new_client.n()
        )));
    }
    let mut order: Vec<usize> = (0..new_client.n()).collect();
    order.shuffle(&mut rng_from(seed, &[70]));
    let val_n = (new_client.n() / 5).max(1);
    let val = new_client.data.subset(&order[..val_n]);
    let train = ClientDataset {
        id: new_client.id,
        data: new_client.data.subset(&order[val_n..]),
        pixel_perm: new_client.pixel_perm.clone(),
    };

    let mut model = global.clone();
    let mut op = fusion.cloned();
    let local = LocalConfig { epochs: 1, batch_size };

    let val_accuracy = |m: &Model, o: Option<&FusionOperator>| -> Result<f64> {
        match (strategy, o) {
            (Strategy::FedFusion { .. }, Some(op)) => client_eval_fusion(m, op, global, &val),
            _ => Ok(evaluate(m, None, &val)?.0),
        }
    };

    let mut best = val_accuracy(&model, op.as_ref())?;
    let mut last = best;
    let mut streak = 0usize;
    for epoch in 1..=max_epochs {
        let epoch_seed = mix_seed(seed, &[71, epoch as u64]);
        match strategy {
            Strategy::FedAvg => {
                model = client_update_fedavg(&model, &train, &local, lr, epoch_seed)?.model;
            }
            Strategy::FedMmd { penalty, lambda, target } => {
                model = local_train_fedmmd(
                    &model, global, &train, &local, lr, *lambda, *penalty, *target, epoch_seed,
                )?
                .model;
            }
            Strategy::FedFusion { pin_lambda, cache_global_features, .. } => {
                let update = local_train_fedfusion(
                    &model,
                    op.as_ref().expect("fusion strategy carries an operator"),
                    global,
                    &train,
                    &local,
                    lr,
                    *pin_lambda,
                    *cache_global_features,
                    epoch_seed,
                )?;
                model = update.model;
                op = update.fusion;
            }
        }
        last = val_accuracy(&model, op.as_ref())?;
        if last > best + rule.min_delta {
            best = last;
            streak = 0;
        } else {
            streak += 1;
            if streak >= rule.window {
                return Ok(NewClientOutcome {
                    epochs: epoch,
                    converged: true,
                    final_val_accuracy: last,
                    best_val_accuracy: best,
                });
            }
        }
    }
    Ok(NewClientOutcome {
        epochs: max_epochs,
        converged: false,
        final_val_accuracy: last,
        best_val_accuracy: best,
    })
}

/// Client-side fusion inference: local extractor stream from `model`, frozen
/// global stream from `reference`.
fn client_eval_fusion(
    model: &Model,
    op: &FusionOperator,
    reference: &Model,
    ds: &Dataset,
) -> Result<f64> {
    let split = model.split_index;
    let n_layers = model.layers.len();
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(512) {
        let sub = ds.subset(chunk);
        let mut rng = rng_from(0, &[]);
        let fl = forward_range(model, 0..split, &sub.images, Mode::Eval, &mut rng)
            .map_err(CliError::from)?
            .output;
        let fg = forward_range(reference, 0..split, &sub.images, Mode::Eval, &mut rng)
            .map_err(CliError::from)?
            .output;
        let feat_shape = model.extractor_output_shape();
        let (fg, fl) = (
            channel_major(&fg, &feat_shape)?,
            channel_major(&fl, &feat_shape)?,
        );
        let fused = fuse_forward_batch(op, &fg, &fl).map_err(CliError::from)?;
        let fused = channel_minor(&fused, &feat_shape)?;
        let logits = forward_range(model, split..n_layers, &fused, Mode::Eval, &mut rng)
            .map_err(CliError::from)?
            .output;
        let (_, _unused) = cross_entropy(&logits, &sub.labels).map_err(CliError::from)?;
        let k = logits.len() / chunk.len();
        for (row, &label) in logits.data().chunks_exact(k).zip(&sub.labels) {
            let mut bestj = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[bestj] {
                    bestj = j;
                }
            }
            if bestj == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn channel_major(t: &fedsim_core::Tensor, feat: &[usize]) -> Result<fedsim_core::Tensor> {
    if feat.len() == 1 {
        return Ok(t.clone());
    }
    let (n, h, w, c) = (t.dim(0), feat[0], feat[1], feat[2]);
    let hw = h * w;
    let mut data = vec![0.0; t.len()];
    for img in 0..n {
        let base = img * hw * c;
        for p in 0..hw {
            for ch in 0..c {
                data[base + ch * hw + p] = t.data()[base + p * c + ch];
            }
        }
    }
    fedsim_core::Tensor::new(vec![n, c, h, w], data).map_err(CliError::from)
}

fn channel_minor(t: &fedsim_core::Tensor, feat: &[usize]) -> Result<fedsim_core::Tensor> {
    if feat.len() == 1 {
        return Ok(t.clone());
    }
    let (n, h, w, c) = (t.dim(0), feat[0], feat[1], feat[2]);
    let hw = h * w;
    let mut data = vec![0.0; t.len()];
    for img in 0..n {
        let base = img * hw * c;
        for ch in 0..c {
            for p in 0..hw {
                data[base + p * c + ch] = t.data()[base + ch * hw + p];
            }
        }
    }
    fedsim_core::Tensor::new(vec![n, h, w, c], data).map_err(CliError::from)
}

pub const METRICS_HEADER: &str =
    "round,test_accuracy,test_loss,mean_train_loss,lr,bytes_up,bytes_down,wall_seconds";

pub fn format_metrics_row(m: &RoundMetrics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.8},{},{},{:.3}",
        m.round,
        m.test_accuracy,
        m.test_loss,
        m.mean_train_loss,
        m.lr,
        m.bytes_up,
        m.bytes_down,
        m.wall_seconds
    )
}

/// Run every seed and write metrics, summary, probe results, and the
/// resolved-config echo under `<out_dir>/<name>/`.
pub fn run_experiment(cfg: &ExperimentConfig, echo: &RawConfig) -> Result<ExperimentOutput> {
    let run_dir = cfg.out_dir.join(&cfg.name);
    fs::create_dir_all(&run_dir).map_err(CliError::io(&run_dir))?;

    let echo_text = toml::to_string_pretty(echo)
        .map_err(|e| CliError::Config(format!("cannot serialize resolved config: {e}")))?;
    let echo_path = run_dir.join("resolved.toml");
    fs::write(&echo_path, echo_text).map_err(CliError::io(&echo_path))?;

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        let seed_dir = run_dir.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir).map_err(CliError::io(&seed_dir))?;
        let metrics_path = seed_dir.join("metrics.csv");
        let mut f = fs::File::create(&metrics_path).map_err(CliError::io(&metrics_path))?;
        writeln!(f, "{METRICS_HEADER}").map_err(CliError::io(&metrics_path))?;
        for m in &run.metrics {
            writeln!(f, "{}", format_metrics_row(m)).map_err(CliError::io(&metrics_path))?;
        }
        runs.push(run);
    }

    let summary_path = run_dir.join("summary.csv");
    let mut f = fs::File::create(&summary_path).map_err(CliError::io(&summary_path))?;
    let mut header = String::from("seed,final_accuracy,final_loss");
    for &m in &cfg.milestones {
        header.push_str(&format!(",rounds_to_{m}"));
    }
    writeln!(f, "{header}").map_err(CliError::io(&summary_path))?;
    for run in &runs {
        let last = run.metrics.last();
        let mut row = format!(
            "{},{},{}",
            run.seed,
            last.map_or("-".into(), |m| format!("{:.6}", m.test_accuracy)),
            last.map_or("-".into(), |m| format!("{:.6}", m.test_loss)),
        );
        for (_, reached) in &run.milestones {
            match reached {
                Some(r) => row.push_str(&format!(",{r}")),
                None => row.push_str(",not_reached"),
            }
        }
        writeln!(f, "{row}").map_err(CliError::io(&summary_path))?;
    }

    if cfg.new_client_probe.is_some() {
        let probe_path = run_dir.join("new_client.csv");
        let mut f = fs::File::create(&probe_path).map_err(CliError::io(&probe_path))?;
        writeln!(f, "seed,epochs,converged,final_val_accuracy").map_err(CliError::io(&probe_path))?;
        for run in &runs {
            if let Some(p) = &run.new_client {
                writeln!(
                    f,
                    "{},{},{},{:.6}",
                    run.seed, p.epochs, p.converged, p.final_val_accuracy
                )
                .map_err(CliError::io(&probe_path))?;
            }
        }
    }

    Ok(ExperimentOutput { run_dir, runs })
}
