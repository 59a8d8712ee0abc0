use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim_cli::analysis::{analyze_dir, emit_plot_data, format_report, write_report_csv};
use fedsim_cli::config::parse_config;
use fedsim_cli::error::{CliError, Result};
use fedsim_cli::experiment::run_experiment;

use fedsim_core::data::{
    load_cifar_binary, load_idx, partition_class_split, partition_iid, partition_permuted,
    partition_shards, synthetic_dataset, ClientDataset, Dataset,
};

#[derive(Parser)]
#[command(name = "fedsim", about = "Federated-learning simulation harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config-driven experiment (one directory of metrics per seed).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition a dataset and write the client manifest.
    Partition(PartitionArgs),
    /// Milestone analysis over a directory of runs.
    Analyze {
        /// Comma-separated accuracy targets, e.g. 0.94,0.95
        #[arg(long, value_delimiter = ',')]
        milestones: Vec<f64>,
        /// Baseline strategy for round reductions.
        #[arg(long, default_value = "fedavg")]
        baseline: String,
        dir: PathBuf,
    },
    /// Flatten run metrics into one tidy table for plotting.
    Plotdata { dir: PathBuf },
}

#[derive(Args)]
struct PartitionArgs {
    /// Dataset kind: synthetic | mnist | cifar10
    #[arg(long)]
    dataset: String,
    /// synthetic: example count
    #[arg(long)]
    n: Option<usize>,
    /// synthetic: example shape, e.g. 28,28,1
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    /// synthetic: class count
    #[arg(long)]
    classes: Option<usize>,
    /// mnist: IDX image/label files
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// cifar10: binary batch files
    #[arg(long, value_delimiter = ',')]
    files: Option<Vec<PathBuf>>,
    /// Scheme: iid | shards | class_split | permuted
    #[arg(long)]
    scheme: String,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    num_shards: Option<usize>,
    #[arg(long)]
    shard_size: Option<usize>,
    #[arg(long)]
    shards_per_client: Option<usize>,
    /// class_split groups, e.g. 0-4,5-9
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<String>>,
    #[arg(long)]
    per_client: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let (mut cfg, mut echo) = parse_config(&config)?;
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
                echo.seeds = Some(vec![seed]);
            }
            if let Some(out) = out {
                cfg.out_dir = out.clone();
                echo.out_dir = Some(out);
            }
            let output = run_experiment(&cfg, &echo)?;
            println!(
                "run `{}`: {} seed(s) written under {}",
                cfg.name,
                output.runs.len(),
                output.run_dir.display()
            );
            for run in &output.runs {
                let last = run.metrics.last();
                println!(
                    "  seed {}: rounds {}, final accuracy {}",
                    run.seed,
                    run.metrics.len(),
                    last.map_or("-".into(), |m| format!("{:.4}", m.test_accuracy))
                );
            }
            Ok(())
        }
        Command::Partition(args) => partition_cmd(args),
        Command::Analyze { milestones, baseline, dir } => {
            if milestones.is_empty() {
                return Err(CliError::Config("--milestones needs at least one target".into()));
            }
            for &m in &milestones {
                if !(m > 0.0 && m < 1.0) {
                    return Err(CliError::Config(format!("milestone {m} outside (0, 1)")));
                }
            }
            let report = analyze_dir(&dir, &milestones, &baseline)?;
            print!("{}", format_report(&report));
            let csv_path = dir.join("analysis.csv");
            write_report_csv(&report, &csv_path)?;
            println!("written: {}", csv_path.display());
            Ok(())
        }
        Command::Plotdata { dir } => {
            let (path, rows) = emit_plot_data(&dir)?;
            println!("written: {} ({rows} rows)", path.display());
            Ok(())
        }
    }
}

fn partition_cmd(args: PartitionArgs) -> Result<()> {
    let ds = load_partition_dataset(&args)?;
    let clients = match args.scheme.as_str() {
        "iid" => {
            let k = args
                .clients
                .ok_or_else(|| CliError::Config("--clients required for iid".into()))?;
            partition_iid(&ds, k, args.seed)?
        }
        "shards" => {
            let ns = args
                .num_shards
                .ok_or_else(|| CliError::Config("--num-shards required for shards".into()))?;
            let ss = args
                .shard_size
                .ok_or_else(|| CliError::Config("--shard-size required for shards".into()))?;
            let spc = args.shards_per_client.ok_or_else(|| {
                CliError::Config("--shards-per-client required for shards".into())
            })?;
            partition_shards(&ds, ns, ss, spc, args.seed)?
        }
        "class_split" => {
            let groups = args
                .groups
                .as_ref()
                .ok_or_else(|| CliError::Config("--groups required for class_split".into()))?
                .iter()
                .map(|g| parse_group(g))
                .collect::<Result<Vec<_>>>()?;
            partition_class_split(&ds, &groups)?
        }
        "permuted" => {
            let k = args
                .clients
                .ok_or_else(|| CliError::Config("--clients required for permuted".into()))?;
            let per = args.per_client.unwrap_or(600);
            partition_permuted(&ds, k, per, args.seed)?
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown scheme `{other}` (expected iid, shards, class_split or permuted)"
            )))
        }
    };
    write_manifest(&args, &clients)
}

fn load_partition_dataset(args: &PartitionArgs) -> Result<Dataset> {
    match args.dataset.as_str() {
        "synthetic" => {
            let n = args
                .n
                .ok_or_else(|| CliError::Config("--n required for synthetic".into()))?;
            let shape = args.shape.clone().unwrap_or_else(|| vec![28, 28, 1]);
            let classes = args.classes.unwrap_or(10);
            Ok(synthetic_dataset(n, &shape, classes, args.seed)?)
        }
        "mnist" => {
            let images = args
                .images
                .as_ref()
                .ok_or_else(|| CliError::Config("--images required for mnist".into()))?;
            let labels = args
                .labels
                .as_ref()
                .ok_or_else(|| CliError::Config("--labels required for mnist".into()))?;
            Ok(load_idx(images, labels)?)
        }
        "cifar10" => {
            let files = args
                .files
                .as_ref()
                .ok_or_else(|| CliError::Config("--files required for cifar10".into()))?;
            Ok(load_cifar_binary(files)?)
        }
        other => Err(CliError::Config(format!(
            "unknown dataset `{other}` (expected synthetic, mnist or cifar10)"
        ))),
    }
}

/// "0-4" -> [0,1,2,3,4]; "7" -> [7]
fn parse_group(text: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = text.split_once('-') {
        let a: usize = a
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad group `{text}`")))?;
        let b: usize = b
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad group `{text}`")))?;
        if b < a {
            return Err(CliError::Config(format!("bad group range `{text}`")));
        }
        Ok((a..=b).collect())
    } else {
        Ok(vec![text
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad group `{text}`")))?])
    }
}

fn write_manifest(args: &PartitionArgs, clients: &[ClientDataset]) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(CliError::io(&args.out))?;
    let manifest = args.out.join("manifest.csv");
    let mut text = String::from("client,n_examples,distinct_labels,label_histogram\n");
    for c in clients {
        let hist = c.data.label_histogram();
        let distinct = hist.iter().filter(|&&n| n > 0).count();
        let hist_str: Vec<String> = hist.iter().map(|n| n.to_string()).collect();
        text.push_str(&format!(
            "{},{},{},{}\n",
            c.id,
            c.n(),
            distinct,
            hist_str.join(";")
        ));
    }
    std::fs::write(&manifest, text).map_err(CliError::io(&manifest))?;

    let params = args.out.join("partition.toml");
    let mut text = format!(
        "dataset = \"{}\"\nscheme = \"{}\"\nseed = {}\nclients = {}\n",
        args.dataset,
        args.scheme,
        args.seed,
        clients.len()
    );
    if let Some(per) = args.per_client {
        text.push_str(&format!("per_client = {per}\n"));
    }
    std::fs::write(&params, text).map_err(CliError::io(&params))?;
    println!(
        "partitioned into {} clients; manifest at {}",
        clients.len(),
        manifest.display()
    );
    Ok(())
}
