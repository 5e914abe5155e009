//! Probes over policy snapshots and training logs: surprisal consistency of
//! the modulation coefficients, the martingale residual of response
//! surprisal, and the entropy/success transition between two runs.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aem::{population_coeffs, response_entropy_proxy};
use crate::env::Environment;
use crate::policy::{PolicyTable, StateId, Token};
use crate::rollout::rollout_trajectory;
use crate::stats::{bootstrap_pearson_ci, mean, pearson, sample_std, std_error};
use crate::trainer::{quartile_len, StepMetrics};
use crate::{seeded_rng, Error, Result};

/// Resamples used for the correlation interval.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `None` when either coordinate has zero variance.
    pub pearson_r: Option<f64>,
    /// 95% percentile bootstrap interval of `pearson_r`.
    pub ci95: Option<(f64, f64)>,
    /// Share of agreeing signs among pairs with both coordinates nonzero.
    pub sign_agreement: Option<f64>,
    pub nonzero_pairs: usize,
    pub n_states: usize,
    pub k_samples: usize,
    /// `(alpha - 1, -(S - H_mc))` per sampled response.
    pub pairs: Vec<(f64, f64)>,
}

/// Pairs of one probed state: the `k` sampled responses form the group.
pub fn consistency_pairs<R: Rng + ?Sized>(
    policy: &PolicyTable,
    state: StateId,
    k: usize,
    lambda: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let responses: Vec<_> = (0..k).map(|_| policy.sample_response(state, rng)).collect();
    let h_bar: Vec<f64> = responses
        .iter()
        .map(|r| response_entropy_proxy(&r.entropies))
        .collect::<Result<_>>()?;
    let (_, alpha) = population_coeffs(&h_bar, lambda, epsilon);
    let s: Vec<f64> = responses.iter().map(|r| r.recorded_surprisal()).collect();
    let h_mc = mean(&s);
    Ok(alpha
        .iter()
        .zip(&s)
        .map(|(a, x)| (a - 1.0, -(x - h_mc)))
        .collect())
}

pub fn consistency_probe<R: Rng + ?Sized>(
    policy: &PolicyTable,
    states: &[StateId],
    k: usize,
    lambda: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<ConsistencyReport> {
    let seeds: Vec<u64> = states.iter().map(|_| rng.random()).collect();
    let per_state = states
        .par_iter()
        .zip(&seeds)
        .map(|(&s, &seed)| consistency_pairs(policy, s, k, lambda, epsilon, &mut seeded_rng(seed)))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(f64, f64)> = per_state.concat();
    if pairs.len() < 2 {
        return Err(Error::Statistics(format!(
            "{} pairs; at least 2 required",
            pairs.len()
        )));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let pearson_r = pearson(&xs, &ys);
    let ci95 = pearson_r.and_then(|_| bootstrap_pearson_ci(&xs, &ys, BOOTSTRAP_RESAMPLES, 0.95, rng));
    let (sign_agreement, nonzero_pairs) = sign_agreement(&pairs);
    Ok(ConsistencyReport {
        pearson_r,
        ci95,
        sign_agreement,
        nonzero_pairs,
        n_states: states.len(),
        k_samples: k,
        pairs,
    })
}

/// Agreement rate over pairs with both coordinates nonzero, and their count.
pub fn sign_agreement(pairs: &[(f64, f64)]) -> (Option<f64>, usize) {
    let nonzero: Vec<_> = pairs.iter().filter(|(a, b)| *a != 0.0 && *b != 0.0).collect();
    if nonzero.is_empty() {
        return (None, 0);
    }
    let agree = nonzero
        .iter()
        .filter(|(a, b)| a.signum() == b.signum())
        .count();
    (Some(agree as f64 / nonzero.len() as f64), nonzero.len())
}

/// States drawn from rollouts: a uniformly chosen turn of an episode of a
/// uniformly chosen task, repeated `n` times.
pub fn sample_visited_states<R: Rng + ?Sized>(
    policy: &PolicyTable,
    env: &Environment,
    n: usize,
    rng: &mut R,
) -> Result<Vec<StateId>> {
    (0..n)
        .map(|_| {
            let task = rng.random_range(0..env.task_count());
            let t = rollout_trajectory(policy, env, task, rng.random())?;
            let turn = &t.turns[rng.random_range(0..t.turns.len())];
            Ok(env.policy_state(&turn.state))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    pub position: usize,
    pub count: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoobReport {
    pub residual_mean: f64,
    pub residual_stderr: f64,
    /// Per token position, the mean of `X_l - H_l` over samples reaching it.
    pub per_length_stats: Vec<PositionStats>,
    pub n_samples: usize,
    /// `|mean| < 4 stderr`, or an exactly zero residual.
    pub passed: bool,
}

/// Empirical check that `M_L = sum_l (X_l - H_l)` has mean zero.
pub fn doob_probe<R: Rng + ?Sized>(
    policy: &PolicyTable,
    state: StateId,
    n_samples: usize,
    rng: &mut R,
) -> Result<DoobReport> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be >= 1"));
    }
    let mut totals = Vec::with_capacity(n_samples);
    let mut by_position: Vec<Vec<f64>> = vec![Vec::new(); policy.max_len()];
    for _ in 0..n_samples {
        let r = policy.sample_response(state, rng);
        let mut m = 0.0;
        for (l, (lp, h)) in r.logprobs.iter().zip(&r.entropies).enumerate() {
            let d = -lp - h;
            by_position[l].push(d);
            m += d;
        }
        totals.push(m);
    }
    let residual_mean = mean(&totals);
    let residual_stderr = std_error(&totals);
    let per_length_stats = by_position
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(position, v)| PositionStats {
            position,
            count: v.len(),
            mean: mean(v),
            stderr: std_error(v),
        })
        .collect();
    let passed = residual_mean.abs() < 4.0 * residual_stderr
        || (residual_mean == 0.0 && residual_stderr == 0.0);
    Ok(DoobReport {
        residual_mean,
        residual_stderr,
        per_length_stats,
        n_samples,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixResidual {
    pub prefix: Vec<Token>,
    /// `E[X_l - H_l | prefix]` computed exactly.
    pub residual: f64,
}

/// Exact conditional residual at every non-terminal prefix of the response tree.
pub fn doob_exact(policy: &PolicyTable, state: StateId) -> Result<Vec<PrefixResidual>> {
    let paths = policy.enumerate_responses(state)?;
    let prefixes: BTreeSet<Vec<Token>> = paths
        .iter()
        .flat_map(|a| (0..a.tokens.len()).map(move |l| a.tokens[..l].to_vec()))
        .collect();
    prefixes
        .into_iter()
        .map(|prefix| {
            let node = policy.node(state, &prefix)?;
            let expected_surprisal: f64 = node
                .probs
                .iter()
                .zip(&node.logprobs)
                .map(|(p, lp)| -p * lp)
                .sum();
            Ok(PrefixResidual {
                residual: expected_surprisal - node.entropy,
                prefix,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTransition {
    pub first_quartile_entropy: f64,
    pub last_quartile_entropy: f64,
    pub first_quartile_success: f64,
    pub last_quartile_success: f64,
    /// Fraction of spans with positive advantage, per step.
    pub frac_positive_advantage: Vec<f64>,
}

impl RunTransition {
    pub fn from_metrics(metrics: &[StepMetrics]) -> Self {
        let n = metrics.len();
        let q = quartile_len(n).min(n);
        let avg = |ms: &[StepMetrics], f: fn(&StepMetrics) -> f64| {
            if ms.is_empty() {
                0.0
            } else {
                ms.iter().map(f).sum::<f64>() / ms.len() as f64
            }
        };
        let head = &metrics[..q];
        let tail = &metrics[n - q..];
        Self {
            first_quartile_entropy: avg(head, |m| m.policy_entropy_estimate),
            last_quartile_entropy: avg(tail, |m| m.policy_entropy_estimate),
            first_quartile_success: avg(head, |m| m.success_rate),
            last_quartile_success: avg(tail, |m| m.success_rate),
            frac_positive_advantage: metrics.iter().map(|m| m.frac_positive_advantage).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSummary {
    pub steps: usize,
    pub baseline: RunTransition,
    pub treatment: RunTransition,
    /// Treatment minus baseline.
    pub first_quartile_entropy_diff: f64,
    pub last_quartile_entropy_diff: f64,
    pub last_quartile_success_diff: f64,
}

pub fn transition_tracker(baseline: &[StepMetrics], treatment: &[StepMetrics]) -> Result<TransitionSummary> {
    let steps = |ms: &[StepMetrics]| ms.iter().map(|m| m.step).collect::<Vec<_>>();
    if steps(baseline) != steps(treatment) {
        return Err(Error::protocol("runs cover different step ranges"));
    }
    let b = RunTransition::from_metrics(baseline);
    let t = RunTransition::from_metrics(treatment);
    Ok(TransitionSummary {
        steps: baseline.len(),
        first_quartile_entropy_diff: t.first_quartile_entropy - b.first_quartile_entropy,
        last_quartile_entropy_diff: t.last_quartile_entropy - b.last_quartile_entropy,
        last_quartile_success_diff: t.last_quartile_success - b.last_quartile_success,
        baseline: b,
        treatment: t,
    })
}

/// Seed-averaged view of several baseline/treatment pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionAggregate {
    pub pairs: usize,
    pub mean_first_quartile_entropy_diff: f64,
    pub mean_last_quartile_entropy_diff: f64,
    pub baseline_final_success_mean: f64,
    /// Sample standard deviation across pairs.
    pub baseline_final_success_std: f64,
    pub treatment_final_success_mean: f64,
    /// Treatment keeps more entropy over the first quartile.
    pub early_higher: bool,
    /// Treatment ends with less entropy over the last quartile.
    pub late_lower: bool,
    /// Treatment success is at least baseline mean minus one standard deviation.
    pub success_kept: bool,
}

impl TransitionAggregate {
    pub fn holds(&self) -> bool {
        self.early_higher && self.late_lower && self.success_kept
    }
}

pub fn aggregate_transitions(summaries: &[TransitionSummary]) -> Result<TransitionAggregate> {
    if summaries.is_empty() {
        return Err(Error::Statistics("no run pairs to aggregate".into()));
    }
    let col = |f: fn(&TransitionSummary) -> f64| summaries.iter().map(f).collect::<Vec<_>>();
    let first = mean(&col(|t| t.first_quartile_entropy_diff));
    let last = mean(&col(|t| t.last_quartile_entropy_diff));
    let base_success = col(|t| t.baseline.last_quartile_success);
    let treat_success = mean(&col(|t| t.treatment.last_quartile_success));
    let base_mean = mean(&base_success);
    let base_std = sample_std(&base_success);
    Ok(TransitionAggregate {
        pairs: summaries.len(),
        mean_first_quartile_entropy_diff: first,
        mean_last_quartile_entropy_diff: last,
        baseline_final_success_mean: base_mean,
        baseline_final_success_std: base_std,
        treatment_final_success_mean: treat_success,
        early_higher: first > 0.0,
        late_lower: last < 0.0,
        success_kept: treat_success >= base_mean - base_std,
    })
}
