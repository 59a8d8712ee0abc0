//! Experiment configuration: TOML with `[dataset]`, `[partition]`,
//! `[federation]`, `[strategy]` and `[evaluation]` sections.
//!
//! Parsing is fail-closed: unknown keys anywhere are rejected, and every
//! per-kind requirement is validated with the offending key path in the
//! message. `parse_config` returns the resolved config plus a fully
//! defaulted echo for writing alongside run outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedsim_core::federation::{BatchSize, Penalty, PenaltyTarget, Strategy};
use fedsim_core::fusion::FusionVariant;
use fedsim_core::nn::{ArchPreset, ArchSpec};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    /// Run label; output lands in `<out_dir>/<name>/`. Defaults to the
    /// strategy label so analysis can group runs by strategy.
    pub name: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub federation: FederationSection,
    pub strategy: StrategySection,
    pub evaluation: Option<EvaluationSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: String,
    // synthetic
    pub n: Option<usize>,
    pub test_n: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub classes: Option<usize>,
    pub noise: Option<f64>,
    /// Gaussian modes per class (classes become multi-modal for > 1).
    pub clusters_per_class: Option<usize>,
    // mnist (IDX files)
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    // cifar10 (binary batches)
    pub train_files: Option<Vec<PathBuf>>,
    pub test_files: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub scheme: String,
    pub clients: Option<usize>,
    // shards
    pub num_shards: Option<usize>,
    pub shard_size: Option<usize>,
    pub shards_per_client: Option<usize>,
    // class_split
    pub groups: Option<Vec<Vec<usize>>>,
    // permuted
    pub per_client: Option<usize>,
    pub test_per_client: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub arch: String,
    pub hidden: Option<usize>,
    pub client_fraction: Option<f64>,
    pub local_epochs: Option<usize>,
    pub batch_size: Option<BatchSizeField>,
    pub rounds: usize,
    pub base_lr: f64,
    pub lr_decay: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSizeField {
    Count(usize),
    Word(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub name: String,
    // fedmmd
    pub penalty: Option<String>,
    pub lambda: Option<f64>,
    pub mmd_on: Option<String>,
    // fedfusion
    pub variant: Option<String>,
    pub ema_beta: Option<f64>,
    pub pin_lambda: Option<f64>,
    pub cache_global_features: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub cadence: Option<usize>,
    pub milestones: Option<Vec<f64>>,
    // newly-incoming-client probe
    pub new_client_probe: Option<bool>,
    pub new_client_n: Option<usize>,
    pub new_client_max_epochs: Option<usize>,
    pub plateau_delta: Option<f64>,
    pub plateau_window: Option<usize>,
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        test_n: usize,
        shape: Vec<usize>,
        classes: usize,
        noise: f64,
        clusters_per_class: usize,
    },
    Mnist { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    Cifar10 { train_files: Vec<PathBuf>, test_files: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionSpec {
    Iid { clients: usize },
    Shards { num_shards: usize, shard_size: usize, shards_per_client: usize },
    ClassSplit { groups: Vec<Vec<usize>> },
    Permuted { clients: usize, per_client: usize, test_per_client: usize },
}

impl PartitionSpec {
    pub fn client_count(&self) -> usize {
        match self {
            PartitionSpec::Iid { clients } => *clients,
            PartitionSpec::Shards { num_shards, shards_per_client, .. } => {
                num_shards / shards_per_client
            }
            PartitionSpec::ClassSplit { groups } => groups.len(),
            PartitionSpec::Permuted { clients, .. } => *clients,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewClientProbe {
    pub n: usize,
    pub max_epochs: usize,
    pub plateau_delta: f64,
    pub plateau_window: usize,
}

/// Fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub arch: ArchSpec,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: BatchSize,
    pub rounds: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub strategy: Strategy,
    pub eval_cadence: usize,
    pub milestones: Vec<f64>,
    pub new_client_probe: Option<NewClientProbe>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn require<T>(value: Option<T>, key: &str, context: &str) -> Result<T> {
    value.ok_or_else(|| config_err(format!("missing key {key} ({context})")))
}

/// Parse and validate a config file; returns the resolved config and the
/// defaults-filled raw form for echoing.
pub fn parse_config(path: &Path) -> Result<(ExperimentConfig, RawConfig)> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<(ExperimentConfig, RawConfig)> {
    let mut raw: RawConfig =
        toml::from_str(text).map_err(|e| config_err(e.message().to_string()))?;
    let resolved = resolve(&mut raw)?;
    Ok((resolved, raw))
}

fn resolve(raw: &mut RawConfig) -> Result<ExperimentConfig> {
    let dataset = resolve_dataset(&mut raw.dataset)?;
    let partition = resolve_partition(&mut raw.partition, &dataset)?;
    let strategy = resolve_strategy(&mut raw.strategy)?;

    let fed = &mut raw.federation;
    let preset = ArchPreset::parse(&fed.arch).map_err(|e| config_err(e.to_string()))?;
    let example_shape = match &dataset {
        DatasetSpec::Synthetic { shape, .. } => shape.clone(),
        DatasetSpec::Mnist { .. } => vec![28, 28, 1],
        DatasetSpec::Cifar10 { .. } => vec![32, 32, 3],
    };
    let classes = match &dataset {
        DatasetSpec::Synthetic { classes, .. } => *classes,
        _ => 10,
    };
    let arch = match preset {
        ArchPreset::MnistCnn => ArchSpec { preset, input_shape: example_shape, classes, hidden: 0 },
        ArchPreset::CifarCnn => ArchSpec { preset, input_shape: example_shape, classes, hidden: 0 },
        ArchPreset::TestMlp => {
            let hidden = fed.hidden.unwrap_or(64);
            fed.hidden = Some(hidden);
            ArchSpec { preset, input_shape: example_shape, classes, hidden }
        }
    };

    let client_fraction = fed.client_fraction.unwrap_or(1.0);
    fed.client_fraction = Some(client_fraction);
    if !(client_fraction > 0.0 && client_fraction <= 1.0) {
        return Err(config_err(format!(
            "[federation].client_fraction {client_fraction} outside (0, 1]"
        )));
    }
    let local_epochs = fed.local_epochs.unwrap_or(1);
    fed.local_epochs = Some(local_epochs);
    if local_epochs == 0 {
        return Err(config_err("[federation].local_epochs must be >= 1"));
    }
    let batch_size = match fed.batch_size.get_or_insert(BatchSizeField::Word("full".into())) {
        BatchSizeField::Count(0) => {
            return Err(config_err("[federation].batch_size must be positive"))
        }
        BatchSizeField::Count(b) => BatchSize::Fixed(*b),
        BatchSizeField::Word(w) if w == "full" => BatchSize::Full,
        BatchSizeField::Word(w) => {
            return Err(config_err(format!(
                "[federation].batch_size must be a positive integer or \"full\", got \"{w}\""
            )))
        }
    };
    if !(fed.base_lr > 0.0) || !fed.base_lr.is_finite() {
        return Err(config_err(format!(
            "[federation].base_lr {} must be positive",
            fed.base_lr
        )));
    }
    let lr_decay = fed.lr_decay.unwrap_or(1.0);
    fed.lr_decay = Some(lr_decay);
    if !(lr_decay > 0.0 && lr_decay <= 1.0) {
        return Err(config_err(format!(
            "[federation].lr_decay {lr_decay} outside (0, 1]"
        )));
    }

    let eval = raw.evaluation.get_or_insert(EvaluationSection {
        cadence: None,
        milestones: None,
        new_client_probe: None,
        new_client_n: None,
        new_client_max_epochs: None,
        plateau_delta: None,
        plateau_window: None,
    });
    let eval_cadence = *eval.cadence.get_or_insert(1);
    if eval_cadence == 0 {
        return Err(config_err("[evaluation].cadence must be >= 1"));
    }
    let milestones = eval.milestones.get_or_insert_with(Vec::new).clone();
    for &m in &milestones {
        if !(m > 0.0 && m < 1.0) {
            return Err(config_err(format!(
                "[evaluation].milestones entry {m} outside (0, 1)"
            )));
        }
    }
    let new_client_probe = if eval.new_client_probe.unwrap_or(false) {
        Some(NewClientProbe {
            n: *eval.new_client_n.get_or_insert(200),
            max_epochs: *eval.new_client_max_epochs.get_or_insert(40),
            plateau_delta: *eval.plateau_delta.get_or_insert(0.001),
            plateau_window: *eval.plateau_window.get_or_insert(3),
        })
    } else {
        eval.new_client_probe = Some(false);
        None
    };

    let name = raw.name.get_or_insert_with(|| strategy.label()).clone();
    let seeds = raw.seeds.get_or_insert_with(|| vec![0]).clone();
    if seeds.is_empty() {
        return Err(config_err("seeds must be nonempty"));
    }
    let out_dir = raw.out_dir.get_or_insert_with(|| PathBuf::from("runs")).clone();

    Ok(ExperimentConfig {
        name,
        seeds,
        out_dir,
        dataset,
        partition,
        arch,
        client_fraction,
        local_epochs,
        batch_size,
        rounds: raw.federation.rounds,
        base_lr: raw.federation.base_lr,
        lr_decay,
        strategy,
        eval_cadence,
        milestones,
        new_client_probe,
    })
}

fn resolve_dataset(d: &mut DatasetSection) -> Result<DatasetSpec> {
    match d.kind.as_str() {
        "synthetic" => {
            let n = require(d.n, "[dataset].n", "synthetic size")?;
            let test_n = *d.test_n.get_or_insert(n / 5 + 1);
            let shape = d.shape.get_or_insert_with(|| vec![28, 28, 1]).clone();
            if shape.is_empty() || shape.iter().any(|&s| s == 0) {
                return Err(config_err(format!("[dataset].shape {shape:?} invalid")));
            }
            let classes = *d.classes.get_or_insert(10);
            let noise = *d.noise.get_or_insert(0.1);
            if noise < 0.0 {
                return Err(config_err(format!("[dataset].noise {noise} must be >= 0")));
            }
            let clusters_per_class = *d.clusters_per_class.get_or_insert(1);
            if clusters_per_class == 0 {
                return Err(config_err("[dataset].clusters_per_class must be >= 1"));
            }
            Ok(DatasetSpec::Synthetic { n, test_n, shape, classes, noise, clusters_per_class })
        }
        "mnist" => Ok(DatasetSpec::Mnist {
            train_images: require(d.train_images.clone(), "[dataset].train_images", "mnist")?,
            train_labels: require(d.train_labels.clone(), "[dataset].train_labels", "mnist")?,
            test_images: require(d.test_images.clone(), "[dataset].test_images", "mnist")?,
            test_labels: require(d.test_labels.clone(), "[dataset].test_labels", "mnist")?,
        }),
        "cifar10" => Ok(DatasetSpec::Cifar10 {
            train_files: require(d.train_files.clone(), "[dataset].train_files", "cifar10")?,
            test_files: require(d.test_files.clone(), "[dataset].test_files", "cifar10")?,
        }),
        other => Err(config_err(format!(
            "[dataset].kind \"{other}\" unknown (expected synthetic, mnist or cifar10)"
        ))),
    }
}

fn resolve_partition(p: &mut PartitionSection, _dataset: &DatasetSpec) -> Result<PartitionSpec> {
    match p.scheme.as_str() {
        "iid" => Ok(PartitionSpec::Iid {
            clients: require(p.clients, "[partition].clients", "iid scheme")?,
        }),
        "shards" => {
            let num_shards = require(p.num_shards, "[partition].num_shards", "shards scheme")?;
            let shard_size = require(p.shard_size, "[partition].shard_size", "shards scheme")?;
            let spc =
                require(p.shards_per_client, "[partition].shards_per_client", "shards scheme")?;
            if spc == 0 || num_shards == 0 || num_shards % spc != 0 {
                return Err(config_err(format!(
                    "[partition].num_shards {num_shards} must be a positive multiple of shards_per_client {spc}"
                )));
            }
            Ok(PartitionSpec::Shards { num_shards, shard_size, shards_per_client: spc })
        }
        "class_split" => {
            let groups = require(p.groups.clone(), "[partition].groups", "class_split scheme")?;
            if groups.is_empty() {
                return Err(config_err("[partition].groups must be nonempty"));
            }
            Ok(PartitionSpec::ClassSplit { groups })
        }
        "permuted" => {
            let clients = require(p.clients, "[partition].clients", "permuted scheme")?;
            let per_client = *p.per_client.get_or_insert(600);
            let test_per_client = *p.test_per_client.get_or_insert(200);
            Ok(PartitionSpec::Permuted { clients, per_client, test_per_client })
        }
        other => Err(config_err(format!(
            "[partition].scheme \"{other}\" unknown (expected iid, shards, class_split or permuted)"
        ))),
    }
}

fn resolve_strategy(s: &mut StrategySection) -> Result<Strategy> {
    match s.name.as_str() {
        "fedavg" => Ok(Strategy::FedAvg),
        "fedmmd" => {
            let lambda = *s.lambda.get_or_insert(0.1);
            if lambda < 0.0 {
                return Err(config_err(format!("[strategy].lambda {lambda} must be >= 0")));
            }
            let penalty = match s.penalty.get_or_insert_with(|| "mmd".into()).as_str() {
                "mmd" => Penalty::Mmd,
                "l2" => Penalty::L2,
                other => {
                    return Err(config_err(format!(
                        "[strategy].penalty \"{other}\" unknown (expected mmd or l2)"
                    )))
                }
            };
            let target = match s.mmd_on.get_or_insert_with(|| "logits".into()).as_str() {
                "logits" => PenaltyTarget::Logits,
                "features" => PenaltyTarget::Features,
                other => {
                    return Err(config_err(format!(
                        "[strategy].mmd_on \"{other}\" unknown (expected logits or features)"
                    )))
                }
            };
            Ok(Strategy::FedMmd { penalty, lambda, target })
        }
        "fedfusion" => {
            let variant_name = require(s.variant.clone(), "[strategy].variant", "fedfusion")?;
            let variant =
                FusionVariant::parse(&variant_name).map_err(|e| config_err(e.to_string()))?;
            let ema_beta = *s.ema_beta.get_or_insert(0.5);
            if !(0.0..1.0).contains(&ema_beta) {
                return Err(config_err(format!(
                    "[strategy].ema_beta {ema_beta} outside [0, 1)"
                )));
            }
            Ok(Strategy::FedFusion {
                variant,
                ema_beta,
                pin_lambda: s.pin_lambda,
                cache_global_features: *s.cache_global_features.get_or_insert(true),
            })
        }
        other => Err(config_err(format!(
            "[strategy].name \"{other}\" unknown (expected fedavg, fedmmd or fedfusion)"
        ))),
    }
}
