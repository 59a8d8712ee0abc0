//! Post-run analysis: milestone scans over metrics files, cross-strategy
//! round reductions, and tidy plot-data export.

use std::fs;
use std::path::{Path, PathBuf};

use fedsim_core::federation::RoundMetrics;

use crate::error::{CliError, Result};

/// One parsed metrics row. Raw column strings are kept so downstream files
/// can copy values byte-identically.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub round: usize,
    pub test_accuracy: f64,
    pub raw_accuracy: String,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: empty metrics file", path.display())))?;
    if !header.starts_with("round,test_accuracy") {
        return Err(CliError::Data(format!(
            "{}: unexpected metrics header `{header}`",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 8 {
            return Err(CliError::Data(format!(
                "{}: row {} has {} fields, expected 8",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let round = fields[0].parse::<usize>().map_err(|e| {
            CliError::Data(format!("{}: row {}: bad round: {e}", path.display(), i + 2))
        })?;
        let acc = fields[1].parse::<f64>().map_err(|e| {
            CliError::Data(format!("{}: row {}: bad accuracy: {e}", path.display(), i + 2))
        })?;
        rows.push(MetricRow { round, test_accuracy: acc, raw_accuracy: fields[1].to_string() });
    }
    Ok(rows)
}

/// First recorded round whose test accuracy reaches `target`.
pub fn rounds_to_milestone(rows: &[MetricRow], target: f64) -> Option<usize> {
    rows.iter().find(|r| r.test_accuracy >= target).map(|r| r.round)
}

/// Same scan over in-memory round metrics.
pub fn rounds_to_milestone_values(metrics: &[RoundMetrics], target: f64) -> Option<usize> {
    metrics.iter().find(|m| m.test_accuracy >= target).map(|m| m.round)
}

/// Median over per-seed milestone results; unreached seeds count as worse
/// than any reached round, and an unreached median reports as `None`.
pub fn median_rounds(per_seed: &[Option<usize>]) -> Option<f64> {
    if per_seed.is_empty() {
        return None;
    }
    let mut vals: Vec<Option<usize>> = per_seed.to_vec();
    vals.sort_by_key(|v| v.map_or(usize::MAX, |r| r));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2].map(|r| r as f64)
    } else {
        match (vals[n / 2 - 1], vals[n / 2]) {
            (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StrategyMilestone {
    pub strategy: String,
    pub milestone: f64,
    pub per_seed: Vec<(u64, Option<usize>)>,
    pub median: Option<f64>,
    /// `(baseline - this) / baseline`; present when both medians exist.
    pub reduction_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub milestones: Vec<StrategyMilestone>,
    /// (strategy, median final accuracy)
    pub final_accuracy: Vec<(String, f64)>,
}

struct RunDir {
    strategy: String,
    seeds: Vec<(u64, PathBuf)>,
}

fn scan_runs(dir: &Path) -> Result<Vec<RunDir>> {
    let mut runs = Vec::new();
    let entries = fs::read_dir(dir).map_err(CliError::io(dir))?;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    names.sort();
    for path in names {
        let strategy = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mut seeds = Vec::new();
        for entry in fs::read_dir(&path).map_err(CliError::io(&path))? {
            let p = entry.map_err(CliError::io(&path))?.path();
            let Some(name) = p.file_name().and_then(|s| s.to_str()) else { continue };
            if let Some(seed_str) = name.strip_prefix("seed_") {
                if let Ok(seed) = seed_str.parse::<u64>() {
                    let metrics = p.join("metrics.csv");
                    if metrics.is_file() {
                        seeds.push((seed, metrics));
                    }
                }
            }
        }
        seeds.sort_by_key(|(s, _)| *s);
        if !seeds.is_empty() {
            runs.push(RunDir { strategy, seeds });
        }
    }
    if runs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no `<strategy>/seed_<n>/metrics.csv` runs found",
            dir.display()
        )));
    }
    Ok(runs)
}

/// Milestone table over every run in `dir`, with reductions against the
/// named baseline strategy.
pub fn analyze_dir(dir: &Path, milestones: &[f64], baseline: &str) -> Result<AnalysisReport> {
    let runs = scan_runs(dir)?;
    let mut parsed: Vec<(String, Vec<(u64, Vec<MetricRow>)>)> = Vec::new();
    for run in &runs {
        let mut per_seed = Vec::new();
        for (seed, path) in &run.seeds {
            per_seed.push((*seed, read_metrics_csv(path)?));
        }
        parsed.push((run.strategy.clone(), per_seed));
    }

    let mut report = AnalysisReport { milestones: Vec::new(), final_accuracy: Vec::new() };
    for &target in milestones {
        let baseline_median = parsed
            .iter()
            .find(|(s, _)| s == baseline)
            .map(|(_, seeds)| {
                let per: Vec<Option<usize>> =
                    seeds.iter().map(|(_, rows)| rounds_to_milestone(rows, target)).collect();
                median_rounds(&per)
            })
            .unwrap_or(None);
        for (strategy, seeds) in &parsed {
            let per_seed: Vec<(u64, Option<usize>)> = seeds
                .iter()
                .map(|(seed, rows)| (*seed, rounds_to_milestone(rows, target)))
                .collect();
            let median = median_rounds(&per_seed.iter().map(|(_, r)| *r).collect::<Vec<_>>());
            let reduction = match (baseline_median, median) {
                (Some(base), Some(m)) if strategy != baseline && base > 0.0 => {
                    Some((base - m) / base)
                }
                _ => None,
            };
            report.milestones.push(StrategyMilestone {
                strategy: strategy.clone(),
                milestone: target,
                per_seed,
                median,
                reduction_vs_baseline: reduction,
            });
        }
    }
    for (strategy, seeds) in &parsed {
        let mut finals: Vec<f64> = seeds
            .iter()
            .filter_map(|(_, rows)| rows.last().map(|r| r.test_accuracy))
            .collect();
        finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if !finals.is_empty() {
            let mid = finals.len() / 2;
            let median = if finals.len() % 2 == 1 {
                finals[mid]
            } else {
                0.5 * (finals[mid - 1] + finals[mid])
            };
            report.final_accuracy.push((strategy.clone(), median));
        }
    }
    Ok(report)
}

pub fn format_report(report: &AnalysisReport) -> String {
    let mut out = String::new();
    let mut current = f64::NAN;
    for row in &report.milestones {
        if row.milestone != current {
            current = row.milestone;
            out.push_str(&format!("milestone {:.2}%:\n", current * 100.0));
        }
        let median = row
            .median
            .map_or("not_reached".to_string(), |m| format!("{m:.1}"));
        let reduction = row
            .reduction_vs_baseline
            .map_or(String::new(), |r| format!("  reduction {:.1}%", r * 100.0));
        let seeds: Vec<String> = row
            .per_seed
            .iter()
            .map(|(s, r)| format!("{s}:{}", r.map_or("-".into(), |v| v.to_string())))
            .collect();
        out.push_str(&format!(
            "  {:<20} median_rounds {median}{reduction}  [{}]\n",
            row.strategy,
            seeds.join(" ")
        ));
    }
    out.push_str("final accuracy (median):\n");
    for (strategy, acc) in &report.final_accuracy {
        out.push_str(&format!("  {:<20} {:.4}\n", strategy, acc));
    }
    out
}

pub fn write_report_csv(report: &AnalysisReport, path: &Path) -> Result<()> {
    let mut text = String::from("milestone,strategy,median_rounds,reduction_vs_baseline\n");
    for row in &report.milestones {
        text.push_str(&format!(
            "{},{},{},{}\n",
            row.milestone,
            row.strategy,
            row.median.map_or("not_reached".into(), |m| format!("{m}")),
            row.reduction_vs_baseline
                .map_or(String::from("-"), |r| format!("{r:.4}")),
        ));
    }
    fs::write(path, text).map_err(CliError::io(path))
}

/// Flatten every run under `dir` into one tidy table:
/// `strategy,seed,round,accuracy`, with accuracy strings copied byte-for-byte
/// from the source metrics.
pub fn emit_plot_data(dir: &Path) -> Result<(PathBuf, usize)> {
    let runs = scan_runs(dir)?;
    let mut out = String::from("strategy,seed,round,accuracy\n");
    let mut rows = 0usize;
    for run in &runs {
        for (seed, path) in &run.seeds {
            for row in read_metrics_csv(path)? {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    run.strategy, seed, row.round, row.raw_accuracy
                ));
                rows += 1;
            }
        }
    }
    let out_path = dir.join("plotdata.csv");
    fs::write(&out_path, out).map_err(CliError::io(&out_path))?;
    Ok((out_path, rows))
}
