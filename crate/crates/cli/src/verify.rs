//! Numerical verification: drift identities against finite differences and
//! response-entropy nesting against enumeration.

use std::path::{Path, PathBuf};

use aemlab::geometry::{verify_drift_fd, DriftKind, DriftReport, Tolerance, VerifyOptions, DEFAULT_FD_STEP};
use aemlab::policy::{PolicyTable, StateId, Token, Vocabulary};
use aemlab::seeded_rng;
use clap::{Args, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;
use crate::output::{create_dir, write_json, write_jsonl};

pub const DRIFT_REPORTS_FILE: &str = "drift_reports.jsonl";
pub const NESTING_REPORTS_FILE: &str = "nesting_reports.jsonl";
pub const VERIFY_SUMMARY_FILE: &str = "verify_summary.json";
/// Absolute bound for the nesting check.
pub const NESTING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyKind {
    Resp,
    Regularized,
    Parametrized,
    Nesting,
    All,
}

impl VerifyKind {
    fn expand(self) -> Vec<VerifyKind> {
        match self {
            VerifyKind::All => vec![
                VerifyKind::Resp,
                VerifyKind::Regularized,
                VerifyKind::Parametrized,
                VerifyKind::Nesting,
            ],
            k => vec![k],
        }
    }

    fn drift(self) -> Option<DriftKind> {
        match self {
            VerifyKind::Resp => Some(DriftKind::Resp),
            VerifyKind::Regularized => Some(DriftKind::Regularized),
            VerifyKind::Parametrized => Some(DriftKind::Parametrized),
            _ => None,
        }
    }

    /// Stream offset so each kind draws the same trials alone or under `all`.
    fn stream(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = VerifyKind::All)]
    pub kind: VerifyKind,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub rel: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub abs: f64,
    /// Draw points next to a vertex; such trials are reported, not asserted.
    #[arg(long)]
    pub near_vertex: bool,
    /// Use a deliberately wrong analytic drift (harness self-test).
    #[arg(long)]
    pub corrupt: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestingReport {
    pub trial: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub response_entropy: f64,
    pub token_entropy_sum: f64,
    pub abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: VerifyKind,
    pub trials: usize,
    pub asserted: usize,
    pub failed: usize,
    pub worst_abs_error: f64,
    pub worst_rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOutcome {
    pub drift: Vec<DriftReport>,
    pub nesting: Vec<NestingReport>,
    pub summaries: Vec<KindSummary>,
}

impl VerifyOutcome {
    pub fn failures(&self) -> usize {
        self.summaries.iter().map(|s| s.failed).sum()
    }
}

/// One state of a random policy with every node written.
pub fn random_enumerable_policy<R: Rng>(rng: &mut R, vocab: usize, max_len: usize, scale: f64) -> (PolicyTable, StateId) {
    let v = Vocabulary::new(vocab, (vocab - 1) as Token).expect("vocab >= 2");
    let mut policy = PolicyTable::new(v, max_len).expect("max_len >= 1");
    let state = StateId(rng.random());
    let mut frontier: Vec<Vec<Token>> = vec![Vec::new()];
    while let Some(prefix) = frontier.pop() {
        let logits = (0..vocab).map(|_| rng.random_range(-scale..scale)).collect();
        policy.set_logits(state, &prefix, logits).expect("prefix within max_len");
        if prefix.len() + 1 < max_len {
            for y in 0..v.terminator() {
                let mut next = prefix.clone();
                next.push(y);
                frontier.push(next);
            }
        }
    }
    (policy, state)
}

pub fn nesting_trials(trials: usize, seed: u64) -> CliResult<Vec<NestingReport>> {
    let mut rng = seeded_rng(seed);
    (0..trials)
        .map(|trial| {
            let vocab = rng.random_range(2..=4);
            let max_len = rng.random_range(1..=4);
            let (policy, s) = random_enumerable_policy(&mut rng, vocab, max_len, 3.0);
            let response_entropy = policy.exact_response_entropy(s)?;
            let token_entropy_sum = policy.expected_token_entropy_sum(s)?;
            let abs_error = (response_entropy - token_entropy_sum).abs();
            Ok(NestingReport {
                trial,
                vocab,
                max_len,
                response_entropy,
                token_entropy_sum,
                abs_error,
                passed: abs_error < NESTING_TOL,
            })
        })
        .collect()
}

fn drift_summary(kind: VerifyKind, reports: &[DriftReport]) -> KindSummary {
    let asserted: Vec<_> = reports.iter().filter(|r| r.asserted).collect();
    KindSummary {
        kind,
        trials: reports.len(),
        asserted: asserted.len(),
        failed: asserted.iter().filter(|r| !r.passed).count(),
        worst_abs_error: asserted.iter().map(|r| r.abs_error).fold(0.0, f64::max),
        worst_rel_error: asserted.iter().map(|r| r.rel_error).fold(0.0, f64::max),
    }
}

pub fn run_verify(args: &VerifyArgs) -> CliResult<VerifyOutcome> {
    if !(args.fd_step > 0.0 && args.rel > 0.0 && args.abs >= 0.0) {
        return Err(CliError::Validation("fd_step and rel must be positive, abs non-negative".into()));
    }
    let opts = VerifyOptions {
        tolerance: Tolerance { rel: args.rel, abs: args.abs },
        near_vertex: args.near_vertex,
        corrupt: args.corrupt,
        ..VerifyOptions::default()
    };
    let mut out = VerifyOutcome::default();
    for kind in args.kind.expand() {
        let seed = args.seed.wrapping_add(kind.stream());
        match kind.drift() {
            Some(dk) => {
                let reports = verify_drift_fd(dk, args.trials, args.fd_step, &opts, &mut seeded_rng(seed))?;
                out.summaries.push(drift_summary(kind, &reports));
                out.drift.extend(reports);
            }
            None => {
                let reports = nesting_trials(args.trials, seed)?;
                out.summaries.push(KindSummary {
                    kind,
                    trials: reports.len(),
                    asserted: reports.len(),
                    failed: reports.iter().filter(|r| !r.passed).count(),
                    worst_abs_error: reports.iter().map(|r| r.abs_error).fold(0.0, f64::max),
                    worst_rel_error: 0.0,
                });
                out.nesting.extend(reports);
            }
        }
    }
    Ok(out)
}

fn write_outcome(args: &VerifyArgs, out: &VerifyOutcome, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    let mut manifest = ManifestBuilder::new("verify", args.seed, args)?;
    manifest.output(write_jsonl(&dir.join(DRIFT_REPORTS_FILE), &out.drift)?);
    manifest.output(write_jsonl(&dir.join(NESTING_REPORTS_FILE), &out.nesting)?);
    manifest.output(write_json(&dir.join(VERIFY_SUMMARY_FILE), &out.summaries)?);
    manifest.finish(dir)?;
    Ok(())
}

fn worst_failures(out: &VerifyOutcome, n: usize) -> String {
    let mut bad: Vec<(f64, String)> = out
        .drift
        .iter()
        .filter(|r| r.asserted && !r.passed)
        .map(|r| (r.rel_error, format!("{:?} trial {} rel {:.3e} abs {:.3e}", r.kind, r.trial, r.rel_error, r.abs_error)))
        .chain(
            out.nesting
                .iter()
                .filter(|r| !r.passed)
                .map(|r| (r.abs_error, format!("nesting trial {} abs {:.3e}", r.trial, r.abs_error))),
        )
        .collect();
    bad.sort_by(|a, b| b.0.total_cmp(&a.0));
    bad.into_iter().take(n).map(|(_, s)| s).collect::<Vec<_>>().join("; ")
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    let out = run_verify(args)?;
    if let Some(dir) = &args.out {
        write_outcome(args, &out, dir)?;
    }
    for s in &out.summaries {
        println!(
            "{:?}: trials {} asserted {} failed {} worst rel {:.3e} abs {:.3e}",
            s.kind, s.trials, s.asserted, s.failed, s.worst_rel_error, s.worst_abs_error
        );
    }
    match out.failures() {
        0 => Ok(()),
        n => Err(CliError::Tolerance(format!("{n} trials out of tolerance; worst: {}", worst_failures(&out, 5)))),
    }
}
