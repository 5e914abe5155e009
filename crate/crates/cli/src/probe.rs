//! Probe subcommands over checkpoints and run logs.

use std::collections::BTreeSet;
use std::path::PathBuf;

use aemlab::env::Environment;
use aemlab::policy::{PolicyTable, StateId};
use aemlab::probes::{
    aggregate_transitions, consistency_probe, doob_exact, doob_probe, sample_visited_states,
    transition_tracker, ConsistencyReport, DoobReport, TransitionAggregate, TransitionSummary,
};
use aemlab::seeded_rng;
use aemlab::trainer::ExperimentConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;
use crate::output::{cell, create_dir, read_metrics, write_csv, write_json, write_jsonl};
use crate::train::ConfigArgs;

pub const CONSISTENCY_FILE: &str = "consistency.json";
pub const CONSISTENCY_PAIRS_FILE: &str = "consistency_pairs.csv";
pub const DOOB_FILE: &str = "doob.jsonl";
pub const TRANSITION_FILE: &str = "transition.json";
pub const TRANSITION_SERIES_FILE: &str = "transition_series.csv";
/// Exact conditional residuals must vanish to this bound.
pub const EXACT_RESIDUAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Args)]
pub struct PolicySource {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Policy checkpoint; the untrained uniform policy when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl PolicySource {
    pub fn load(&self) -> CliResult<(ExperimentConfig, Environment, PolicyTable)> {
        let config = self.config.load()?;
        let env = Environment::new(config.env.clone())?;
        let policy = match &self.checkpoint {
            Some(p) => PolicyTable::load(p)?,
            None => PolicyTable::new(env.vocab(), env.max_len())?,
        };
        if policy.vocab() != env.vocab() || policy.max_len() != env.max_len() {
            return Err(CliError::Validation(
                "checkpoint vocabulary or max_len does not match the environment".into(),
            ));
        }
        Ok((config, env, policy))
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConsistencyArgs {
    #[command(flatten)]
    pub source: PolicySource,
    /// Number of visited states to probe.
    #[arg(long, default_value_t = 64)]
    pub states: usize,
    /// Responses sampled per state.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Exit 2 unless r > 0 with a 95% interval above zero.
    #[arg(long)]
    pub require_positive: bool,
}

#[derive(Debug, Serialize)]
struct ConsistencySettings<'a> {
    experiment: &'a ExperimentConfig,
    checkpoint: &'a Option<PathBuf>,
    states: usize,
    samples: usize,
}

/// Visited states of `policy`, then the probe; both driven by one seed.
pub fn run_consistency(
    policy: &PolicyTable,
    env: &Environment,
    config: &ExperimentConfig,
    states: usize,
    samples: usize,
    seed: u64,
) -> CliResult<ConsistencyReport> {
    let mut rng = seeded_rng(seed);
    let visited = sample_visited_states(policy, env, states, &mut rng)?;
    Ok(consistency_probe(
        policy,
        &visited,
        samples,
        config.train.lambda,
        config.train.epsilon,
        &mut rng,
    )?)
}

pub fn positive_with_confidence(r: &ConsistencyReport) -> bool {
    matches!((r.pearson_r, r.ci95), (Some(p), Some((lo, _))) if p > 0.0 && lo > 0.0)
}

pub fn cmd_consistency(args: &ConsistencyArgs) -> CliResult<()> {
    let (config, env, policy) = args.source.load()?;
    let report = run_consistency(&policy, &env, &config, args.states, args.samples, args.seed)?;
    create_dir(&args.out)?;
    let settings = ConsistencySettings {
        experiment: &config,
        checkpoint: &args.source.checkpoint,
        states: args.states,
        samples: args.samples,
    };
    let mut manifest = ManifestBuilder::new("probe-consistency", args.seed, &settings)?;
    manifest.output(write_json(&args.out.join(CONSISTENCY_FILE), &report)?);
    let rows: Vec<Vec<String>> = report.pairs.iter().map(|(a, d)| vec![cell(*a), cell(*d)]).collect();
    let header = ["alpha_minus_1".to_string(), "delta_s_mc".to_string()];
    manifest.output(write_csv(&args.out.join(CONSISTENCY_PAIRS_FILE), &header, &rows)?);
    manifest.finish(&args.out)?;
    println!(
        "pairs {} nonzero {} r {:?} ci95 {:?} sign agreement {:?}",
        report.pairs.len(),
        report.nonzero_pairs,
        report.pearson_r,
        report.ci95,
        report.sign_agreement
    );
    if args.require_positive && !positive_with_confidence(&report) {
        return Err(CliError::Tolerance("correlation is not positive at 95% confidence".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct DoobArgs {
    #[command(flatten)]
    pub source: PolicySource,
    /// Visited states to draw (duplicates are probed once).
    #[arg(long, default_value_t = 16)]
    pub states: usize,
    /// Responses sampled per state.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoobRecord {
    pub state: StateId,
    pub report: DoobReport,
    /// Largest exact conditional residual, when the response tree is enumerable.
    pub max_exact_residual: Option<f64>,
    pub passed: bool,
}

pub fn run_doob(policy: &PolicyTable, env: &Environment, states: usize, samples: usize, seed: u64) -> CliResult<Vec<DoobRecord>> {
    if samples == 0 {
        return Err(CliError::Validation("samples must be >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let visited: BTreeSet<StateId> = sample_visited_states(policy, env, states, &mut rng)?
        .into_iter()
        .collect();
    visited
        .into_iter()
        .map(|s| {
            let report = doob_probe(policy, s, samples, &mut rng)?;
            let max_exact_residual = match doob_exact(policy, s) {
                Ok(rs) => Some(rs.iter().map(|r| r.residual.abs()).fold(0.0, f64::max)),
                Err(aemlab::Error::Budget { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let passed = report.passed && max_exact_residual.is_none_or(|m| m < EXACT_RESIDUAL_TOL);
            Ok(DoobRecord {
                state: s,
                report,
                max_exact_residual,
                passed,
            })
        })
        .collect()
}

pub fn cmd_doob(args: &DoobArgs) -> CliResult<()> {
    let (config, env, policy) = args.source.load()?;
    let records = run_doob(&policy, &env, args.states, args.samples, args.seed)?;
    create_dir(&args.out)?;
    let mut manifest = ManifestBuilder::new("probe-doob", args.seed, &config)?;
    manifest.output(write_jsonl(&args.out.join(DOOB_FILE), &records)?);
    manifest.finish(&args.out)?;
    let failed: Vec<_> = records.iter().filter(|r| !r.passed).collect();
    println!("states {} failed {}", records.len(), failed.len());
    if !failed.is_empty() {
        let list: Vec<String> = failed
            .iter()
            .map(|r| format!("state {} mean {:.3e} stderr {:.3e}", r.state.0, r.report.residual_mean, r.report.residual_stderr))
            .collect();
        return Err(CliError::Tolerance(list.join("; ")));
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TransitionArgs {
    /// Baseline run directory; repeat once per seed.
    #[arg(long, required = true)]
    pub baseline: Vec<PathBuf>,
    /// Treatment run directory paired with the baseline at the same position.
    #[arg(long, required = true)]
    pub treatment: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub pairs: Vec<TransitionSummary>,
    pub aggregate: TransitionAggregate,
}

pub fn run_transition(args: &TransitionArgs) -> CliResult<TransitionReport> {
    if args.baseline.len() != args.treatment.len() {
        return Err(CliError::Validation(format!(
            "{} baseline runs but {} treatment runs",
            args.baseline.len(),
            args.treatment.len()
        )));
    }
    let pairs = args
        .baseline
        .iter()
        .zip(&args.treatment)
        .map(|(b, t)| Ok(transition_tracker(&read_metrics(b)?, &read_metrics(t)?)?))
        .collect::<CliResult<Vec<_>>>()?;
    let aggregate = aggregate_transitions(&pairs)?;
    Ok(TransitionReport { pairs, aggregate })
}

pub fn cmd_transition(args: &TransitionArgs) -> CliResult<()> {
    let report = run_transition(args)?;
    create_dir(&args.out)?;
    let mut manifest = ManifestBuilder::new("probe-transition", 0, &serde_json::json!({
        "baseline": args.baseline,
        "treatment": args.treatment,
    }))?;
    manifest.output(write_json(&args.out.join(TRANSITION_FILE), &report)?);
    // Per-step series of the first pair, for plotting.
    let b = read_metrics(&args.baseline[0])?;
    let t = read_metrics(&args.treatment[0])?;
    let header: Vec<String> = [
        "step",
        "baseline_entropy",
        "treatment_entropy",
        "baseline_success",
        "treatment_success",
        "baseline_frac_positive",
        "treatment_frac_positive",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = b
        .iter()
        .zip(&t)
        .map(|(x, y)| {
            vec![
                x.step.to_string(),
                cell(x.policy_entropy_estimate),
                cell(y.policy_entropy_estimate),
                cell(x.success_rate),
                cell(y.success_rate),
                cell(x.frac_positive_advantage),
                cell(y.frac_positive_advantage),
            ]
        })
        .collect();
    manifest.output(write_csv(&args.out.join(TRANSITION_SERIES_FILE), &header, &rows)?);
    manifest.finish(&args.out)?;
    let a = &report.aggregate;
    println!(
        "pairs {} first-quartile entropy diff {:+.4} last-quartile diff {:+.4} success {:.4} vs {:.4} (std {:.4})",
        a.pairs,
        a.mean_first_quartile_entropy_diff,
        a.mean_last_quartile_entropy_diff,
        a.treatment_final_success_mean,
        a.baseline_final_success_mean,
        a.baseline_final_success_std
    );
    Ok(())
}
