//! Plot-ready CSV bundles from run directories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use aemlab::trainer::{ModulationRecord, StepMetrics, MODULATION_FILE};
use clap::Args;

use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;
use crate::output::{cell, create_dir, opt_cell, read_jsonl, read_metrics, write_csv};
use crate::verify::{KindSummary, VERIFY_SUMMARY_FILE};

pub const ENTROPY_SERIES_FILE: &str = "entropy_vs_step.csv";
pub const SUCCESS_SERIES_FILE: &str = "success_vs_step.csv";
pub const ALPHA_SCATTER_FILE: &str = "alpha_scatter.csv";
pub const DRIFT_SUMMARY_FILE: &str = "drift_summary.csv";

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories: training runs (metrics log) or verify outputs.
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Column labels from directory names, suffixed when two collide.
pub fn run_labels(runs: &[PathBuf]) -> Vec<String> {
    let base: Vec<String> = runs
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        })
        .collect();
    base.iter()
        .enumerate()
        .map(|(i, b)| {
            if base.iter().filter(|x| *x == b).count() > 1 {
                format!("{b}#{i}")
            } else {
                b.clone()
            }
        })
        .collect()
}

/// One column per run, rows on the union of step indices; missing cells are blank.
pub fn aligned_series(
    labels: &[String],
    logs: &[Vec<StepMetrics>],
    value: fn(&StepMetrics) -> f64,
) -> (Vec<String>, Vec<Vec<String>>) {
    let steps: BTreeSet<usize> = logs.iter().flatten().map(|m| m.step).collect();
    let by_step: Vec<BTreeMap<usize, f64>> = logs
        .iter()
        .map(|log| log.iter().map(|m| (m.step, value(m))).collect())
        .collect();
    let header = std::iter::once("step".to_string()).chain(labels.iter().cloned()).collect();
    let rows = steps
        .into_iter()
        .map(|s| {
            std::iter::once(s.to_string())
                .chain(by_step.iter().map(|m| opt_cell(m.get(&s).copied())))
                .collect()
        })
        .collect();
    (header, rows)
}

pub fn run_report(args: &ReportArgs) -> CliResult<Vec<PathBuf>> {
    if args.runs.is_empty() {
        return Ok(Vec::new());
    }
    let labels = run_labels(&args.runs);
    let mut series_labels = Vec::new();
    let mut logs = Vec::new();
    let mut scatter = Vec::new();
    let mut drift = Vec::new();
    for (dir, label) in args.runs.iter().zip(&labels) {
        let verify = dir.join(VERIFY_SUMMARY_FILE);
        let has_metrics = dir.join(aemlab::trainer::METRICS_FILE).is_file();
        if !has_metrics && !verify.is_file() {
            return Err(CliError::Validation(format!("{}: no metrics log or verify summary", dir.display())));
        }
        if has_metrics {
            series_labels.push(label.clone());
            logs.push(read_metrics(dir)?);
            let modulation = dir.join(MODULATION_FILE);
            if modulation.is_file() {
                for r in read_jsonl::<ModulationRecord>(&modulation)? {
                    scatter.push(vec![
                        label.clone(),
                        r.step.to_string(),
                        cell(r.h_bar),
                        opt_cell(r.h_tilde),
                        cell(r.alpha),
                        cell(r.base_advantage),
                        cell(r.surprisal),
                    ]);
                }
            }
        }
        if verify.is_file() {
            let text = std::fs::read_to_string(&verify).map_err(|e| CliError::io(&verify, e))?;
            for s in serde_json::from_str::<Vec<KindSummary>>(&text)? {
                drift.push(vec![
                    label.clone(),
                    serde_json::to_value(s.kind)?.as_str().unwrap_or_default().to_string(),
                    s.trials.to_string(),
                    s.asserted.to_string(),
                    s.failed.to_string(),
                    cell(s.worst_rel_error),
                    cell(s.worst_abs_error),
                ]);
            }
        }
    }
    create_dir(&args.out)?;
    let mut written = Vec::new();
    let out = |name: &str| args.out.join(name);
    if !logs.is_empty() {
        let (h, rows) = aligned_series(&series_labels, &logs, |m| m.policy_entropy_estimate);
        written.push(write_csv(&out(ENTROPY_SERIES_FILE), &h, &rows)?);
        let (h, rows) = aligned_series(&series_labels, &logs, |m| m.success_rate);
        written.push(write_csv(&out(SUCCESS_SERIES_FILE), &h, &rows)?);
    }
    if !scatter.is_empty() {
        let h = ["run", "step", "h_bar", "h_tilde", "alpha", "base_advantage", "surprisal"].map(String::from);
        written.push(write_csv(&out(ALPHA_SCATTER_FILE), &h, &scatter)?);
    }
    if !drift.is_empty() {
        let h = ["run", "kind", "trials", "asserted", "failed", "worst_rel_error", "worst_abs_error"].map(String::from);
        written.push(write_csv(&out(DRIFT_SUMMARY_FILE), &h, &drift)?);
    }
    Ok(written)
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let written = run_report(args)?;
    if written.is_empty() {
        return Ok(());
    }
    let mut manifest = ManifestBuilder::new("report", 0, &serde_json::json!({ "runs": args.runs }))?;
    manifest.outputs(written.iter().cloned());
    manifest.finish(Path::new(&args.out))?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
