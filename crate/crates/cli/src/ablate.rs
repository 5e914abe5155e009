//! Ablation sweep over coefficient variants and shared seeds.

use std::path::PathBuf;

use aemlab::aem::AemMode;
use aemlab::stats::{mean, sample_std};
use aemlab::trainer::RunSummary;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;
use crate::output::{cell, create_dir, write_csv};
use crate::train::{run_experiment, ConfigArgs};

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated variants; all six when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<AemMode>,
    /// Comma-separated training seeds shared by every variant.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AemMode,
    pub seeds: usize,
    pub success_mean: f64,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub success_std: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
}

impl AblationRow {
    pub fn from_summaries(variant: AemMode, runs: &[RunSummary]) -> Self {
        let success: Vec<f64> = runs.iter().map(|s| s.final_success_rate).collect();
        let reward: Vec<f64> = runs.iter().map(|s| s.final_mean_reward).collect();
        Self {
            variant,
            seeds: runs.len(),
            success_mean: mean(&success),
            success_std: sample_std(&success),
            reward_mean: mean(&reward),
            reward_std: sample_std(&reward),
        }
    }
}

pub fn run_dir(out: &std::path::Path, variant: AemMode, seed: u64) -> PathBuf {
    out.join(variant.name()).join(format!("seed_{seed}"))
}

fn write_table(path: &std::path::Path, rows: &[AblationRow]) -> CliResult<PathBuf> {
    let header: Vec<String> = ["variant", "seeds", "success_mean", "success_std", "reward_mean", "reward_std"]
        .map(String::from)
        .to_vec();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.name().to_string(),
                r.seeds.to_string(),
                cell(r.success_mean),
                cell(r.success_std),
                cell(r.reward_mean),
                cell(r.reward_std),
            ]
        })
        .collect();
    write_csv(path, &header, &cells)
}

/// Runs every (variant, seed) pair; the table is rewritten after each
/// variant so a failure leaves the completed rows on disk.
pub fn run_ablation(args: &AblateArgs) -> CliResult<Vec<AblationRow>> {
    if args.seeds.is_empty() {
        return Err(CliError::Validation("at least one seed is required".into()));
    }
    let base = args.config.load()?;
    let variants = if args.variants.is_empty() {
        AemMode::ALL.to_vec()
    } else {
        args.variants.clone()
    };
    create_dir(&args.out)?;
    let mut manifest = ManifestBuilder::new("ablate", args.seeds[0], &serde_json::json!({
        "experiment": base,
        "variants": variants,
        "seeds": args.seeds,
    }))?;
    let table = args.out.join(ABLATION_FILE);
    let mut rows = Vec::new();
    let mut failure = None;
    'variants: for &variant in &variants {
        let mut summaries = Vec::new();
        for &seed in &args.seeds {
            let mut cfg = base.clone();
            cfg.train.aem_mode = variant;
            cfg.train.seed = seed;
            match run_experiment(&cfg, &run_dir(&args.out, variant, seed), "ablate") {
                Ok(run) => summaries.push(run.summary),
                Err(e) => {
                    failure = Some(e);
                    break 'variants;
                }
            }
        }
        rows.push(AblationRow::from_summaries(variant, &summaries));
        write_table(&table, &rows)?;
    }
    if !rows.is_empty() {
        manifest.output(table);
    }
    manifest.finish(&args.out)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    for r in run_ablation(args)? {
        println!(
            "{:<10} success {:.4} ± {:.4} reward {:.4} ± {:.4} ({} seeds)",
            r.variant.name(),
            r.success_mean,
            r.success_std,
            r.reward_mean,
            r.reward_std,
            r.seeds
        );
    }
    Ok(())
}
