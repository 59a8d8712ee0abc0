//! End-to-end experiment flow through the library: run, metrics files,
//! analysis, plot-data export, and the determinism contract.

use std::fs;

use fedsim_cli::analysis::{
    analyze_dir, emit_plot_data, median_rounds, read_metrics_csv, rounds_to_milestone,
};
use fedsim_cli::config::parse_config_str;
use fedsim_cli::experiment::run_experiment;

fn synthetic_config(name: &str, strategy: &str, out: &str) -> String {
    format!(
        r#"
name = "{name}"
seeds = [1, 2]
out_dir = "{out}"

[dataset]
kind = "synthetic"
n = 120
test_n = 60
shape = [4, 4, 1]
classes = 3
noise = 0.1

[partition]
scheme = "iid"
clients = 4

[federation]
arch = "test_mlp"
hidden = 12
client_fraction = 1.0
local_epochs = 1
batch_size = 16
rounds = 5
base_lr = 0.1

[strategy]
{strategy}

[evaluation]
milestones = [0.5, 0.9]
"#
    )
}

#[test]
fn run_writes_metrics_with_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (cfg, echo) = parse_config_str(&synthetic_config("fedavg", "name = \"fedavg\"", out)).unwrap();
    let output = run_experiment(&cfg, &echo).unwrap();
    assert_eq!(output.runs.len(), 2);

    let metrics_path = output.run_dir.join("seed_1/metrics.csv");
    let text = fs::read_to_string(&metrics_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,test_accuracy,test_loss,mean_train_loss,lr,bytes_up,bytes_down,wall_seconds"
    );
    assert_eq!(lines.count(), 5, "one row per round");

    assert!(output.run_dir.join("resolved.toml").is_file());
    assert!(output.run_dir.join("summary.csv").is_file());

    // resolved echo reparses to the same experiment
    let echo_text = fs::read_to_string(output.run_dir.join("resolved.toml")).unwrap();
    let (cfg2, _) = parse_config_str(&echo_text).unwrap();
    assert_eq!(cfg2.seeds, cfg.seeds);
    assert_eq!(cfg2.rounds, cfg.rounds);
}

#[test]
fn rerun_is_deterministic_except_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (cfg, echo) = parse_config_str(&synthetic_config("fedavg", "name = \"fedavg\"", out)).unwrap();
    let a = run_experiment(&cfg, &echo).unwrap();
    let text_a = fs::read_to_string(a.run_dir.join("seed_1/metrics.csv")).unwrap();
    let b = run_experiment(&cfg, &echo).unwrap();
    let text_b = fs::read_to_string(b.run_dir.join("seed_1/metrics.csv")).unwrap();

    let strip_wall = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
            .collect()
    };
    assert_eq!(strip_wall(&text_a), strip_wall(&text_b));
}

#[test]
fn lambda_zero_fedmmd_matches_fedavg_accuracy_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (avg_cfg, avg_echo) =
        parse_config_str(&synthetic_config("fedavg", "name = \"fedavg\"", out)).unwrap();
    let (mmd_cfg, mmd_echo) = parse_config_str(&synthetic_config(
        "fedmmd_zero",
        "name = \"fedmmd\"\nlambda = 0.0",
        out,
    ))
    .unwrap();
    let a = run_experiment(&avg_cfg, &avg_echo).unwrap();
    let b = run_experiment(&mmd_cfg, &mmd_echo).unwrap();
    for (x, y) in a.runs.iter().zip(&b.runs) {
        for (ma, mb) in x.metrics.iter().zip(&y.metrics) {
            assert_eq!(ma.test_accuracy, mb.test_accuracy);
            assert_eq!(ma.test_loss, mb.test_loss);
        }
    }
}

#[test]
fn analyze_and_plotdata_over_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for (name, strategy) in [
        ("fedavg", "name = \"fedavg\""),
        ("fedfusion_single", "name = \"fedfusion\"\nvariant = \"single\""),
    ] {
        let (cfg, echo) = parse_config_str(&synthetic_config(name, strategy, out)).unwrap();
        run_experiment(&cfg, &echo).unwrap();
    }
    let report = analyze_dir(dir.path(), &[0.5], "fedavg").unwrap();
    assert_eq!(report.milestones.len(), 2);
    assert!(report.final_accuracy.len() == 2);

    let (path, rows) = emit_plot_data(dir.path()).unwrap();
    // 2 strategies x 2 seeds x 5 rounds
    assert_eq!(rows, 20);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "strategy,seed,round,accuracy");

    // plot-data accuracy strings are byte-identical to the source metrics
    let source = fs::read_to_string(dir.path().join("fedavg/seed_1/metrics.csv")).unwrap();
    let source_acc: Vec<&str> = source
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    let plot_acc: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("fedavg,1,"))
        .map(|l| l.split(',').nth(3).unwrap())
        .collect();
    assert_eq!(source_acc, plot_acc);
}

#[test]
fn milestone_scan_on_constructed_fixture() {
    // monotone curve crossing 0.9 at round 7
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let mut text = String::from(
        "round,test_accuracy,test_loss,mean_train_loss,lr,bytes_up,bytes_down,wall_seconds\n",
    );
    for round in 1..=10 {
        let acc = 0.25 + 0.1 * round as f64;
        text.push_str(&format!("{round},{acc:.6},1.0,1.0,0.1,8,8,0.001\n"));
    }
    fs::write(&path, text).unwrap();
    let rows = read_metrics_csv(&path).unwrap();
    assert_eq!(rounds_to_milestone(&rows, 0.9), Some(7));
    assert_eq!(rounds_to_milestone(&rows, 0.5), Some(3));
    assert_eq!(rounds_to_milestone(&rows, 2.0), None, "never reached");
}

#[test]
fn median_rounds_handles_unreached_seeds() {
    assert_eq!(median_rounds(&[Some(10), Some(20), Some(30)]), Some(20.0));
    assert_eq!(median_rounds(&[Some(10), None, Some(30)]), Some(30.0));
    assert_eq!(median_rounds(&[Some(10), None, None]), None);
    assert_eq!(median_rounds(&[Some(10), Some(20)]), Some(15.0));
    assert_eq!(median_rounds(&[]), None);
}

#[test]
fn permuted_scheme_builds_permuted_eval_union() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let text = format!(
        r#"
seeds = [1]
out_dir = "{out}"

[dataset]
kind = "synthetic"
n = 80
test_n = 40
shape = [3, 3, 1]
classes = 2
noise = 0.05

[partition]
scheme = "permuted"
clients = 2
per_client = 30
test_per_client = 10

[federation]
arch = "test_mlp"
hidden = 8
rounds = 2
base_lr = 0.05

[strategy]
name = "fedavg"
"#
    );
    let (cfg, echo) = parse_config_str(&text).unwrap();
    let output = run_experiment(&cfg, &echo).unwrap();
    assert_eq!(output.runs.len(), 1);
    assert_eq!(output.runs[0].metrics.len(), 2);
}

#[test]
fn eval_cadence_thins_metrics_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let text = synthetic_config("fedavg", "name = \"fedavg\"", out)
        .replace("milestones = [0.5, 0.9]", "milestones = [0.5]\ncadence = 2");
    let (cfg, echo) = parse_config_str(&text).unwrap();
    let output = run_experiment(&cfg, &echo).unwrap();
    // rounds 2, 4 on cadence, plus the final round 5
    let rounds: Vec<usize> = output.runs[0].metrics.iter().map(|m| m.round).collect();
    assert_eq!(rounds, vec![2, 4, 5]);
}
