//! Base response-level advantage estimators.
//!
//! All estimators here are outcome-level: every response of a trajectory
//! carries the same value, except the oracle-value estimator whose baseline
//! depends on the state the response was generated in.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::{EnvState, Environment};
use crate::policy::{PolicyTable, ENUMERATION_BUDGET};
use crate::rollout::Group;
use crate::stats::{mean, population_std};
use crate::{Error, Result};

/// Stability constant added to the GRPO standard deviation.
pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    #[default]
    Grpo,
    Rloo,
    OracleValue,
}

/// Advantage per `(rollout, turn)` of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub estimator: Estimator,
    /// `values[rollout][turn]`.
    pub values: Vec<Vec<f64>>,
}

impl AdvantageTable {
    pub fn get(&self, rollout: usize, turn: usize) -> Option<f64> {
        self.values.get(rollout)?.get(turn).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    fn broadcast(estimator: Estimator, group: &Group, per_rollout: &[f64]) -> Self {
        Self {
            estimator,
            values: group
                .trajectories
                .iter()
                .zip(per_rollout)
                .map(|(t, &a)| vec![a; t.turns.len()])
                .collect(),
        }
    }

    /// Checks that the table has exactly one value per span of `group`.
    pub fn check_shape(&self, group: &Group) -> Result<()> {
        let ok = self.values.len() == group.trajectories.len()
            && self
                .values
                .iter()
                .zip(&group.trajectories)
                .all(|(v, t)| v.len() == t.turns.len());
        if ok {
            Ok(())
        } else {
            Err(Error::protocol("advantage table does not match group spans"))
        }
    }
}

fn check_group_size(group: &Group) -> Result<()> {
    if group.trajectories.len() < 2 {
        return Err(Error::config(format!(
            "group of {} trajectories; at least 2 required",
            group.trajectories.len()
        )));
    }
    Ok(())
}

/// Group-normalized reward with population standard deviation.
///
/// A group whose rewards are all equal gets exactly zero advantages.
pub fn grpo_values(rewards: &[f64]) -> Vec<f64> {
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let m = mean(rewards);
    let sd = population_std(rewards);
    rewards.iter().map(|r| (r - m) / (sd + STD_EPSILON)).collect()
}

/// Reward minus the mean of the other rewards in the group.
pub fn rloo_values(rewards: &[f64]) -> Vec<f64> {
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let total: f64 = rewards.iter().sum();
    rewards
        .iter()
        .map(|r| {
            let others = (total - r) / (n - 1.0);
            r - others
        })
        .collect()
}

pub fn grpo_advantage(group: &Group) -> Result<AdvantageTable> {
    check_group_size(group)?;
    Ok(AdvantageTable::broadcast(
        Estimator::Grpo,
        group,
        &grpo_values(&group.rewards()),
    ))
}

pub fn rloo_advantage(group: &Group) -> Result<AdvantageTable> {
    check_group_size(group)?;
    Ok(AdvantageTable::broadcast(
        Estimator::Rloo,
        group,
        &rloo_values(&group.rewards()),
    ))
}

/// Exact expected reward-to-go of environment states under a fixed policy.
///
/// The value of a state counts the terminal reward and every invalid-response
/// penalty still to come; penalties already paid are added by the caller.
pub struct ValueOracle<'a> {
    policy: &'a PolicyTable,
    env: &'a Environment,
    memo: HashMap<EnvState, f64>,
    evaluations: u128,
}

impl<'a> ValueOracle<'a> {
    pub fn new(policy: &'a PolicyTable, env: &'a Environment) -> Result<Self> {
        if policy.vocab() != env.vocab() || policy.max_len() != env.max_len() {
            return Err(Error::config("policy and environment disagree on vocabulary or max_len"));
        }
        Ok(Self {
            policy,
            env,
            memo: HashMap::new(),
            evaluations: 0,
        })
    }

    pub fn value(&mut self, state: &EnvState) -> Result<f64> {
        let scheme = *self.env.reward_scheme();
        if state.done {
            return Ok(if state.success {
                scheme.success_reward
            } else {
                scheme.failure_reward
            });
        }
        if let Some(&v) = self.memo.get(state) {
            return Ok(v);
        }
        let paths = self.policy.enumerate_responses(self.env.policy_state(state))?;
        self.evaluations += paths.len() as u128;
        if self.evaluations > ENUMERATION_BUDGET {
            return Err(Error::Budget {
                required: self.evaluations,
                budget: ENUMERATION_BUDGET,
            });
        }
        let mut v = 0.0;
        for path in &paths {
            let out = self.env.step(state, &path.tokens)?;
            let penalty = if out.valid { 0.0 } else { scheme.invalid_penalty };
            v += path.prob * (penalty + self.value(&out.state)?);
        }
        self.memo.insert(state.clone(), v);
        Ok(v)
    }
}

/// `A_{i,t} = R(tau_i) - V(s_{i,t})` with `V` the exact expected return given
/// the state and the penalties already incurred in the trajectory.
pub fn oracle_value_advantage(
    group: &Group,
    env: &Environment,
    policy: &PolicyTable,
) -> Result<AdvantageTable> {
    let mut oracle = ValueOracle::new(policy, env)?;
    let penalty = env.reward_scheme().invalid_penalty;
    let mut values = Vec::with_capacity(group.trajectories.len());
    for t in &group.trajectories {
        let mut paid = 0usize;
        let mut row = Vec::with_capacity(t.turns.len());
        for turn in &t.turns {
            let v = penalty * paid as f64 + oracle.value(&turn.state)?;
            row.push(t.reward - v);
            if !turn.valid {
                paid += 1;
            }
        }
        values.push(row);
    }
    Ok(AdvantageTable {
        estimator: Estimator::OracleValue,
        values,
    })
}

pub fn compute_advantage(
    estimator: Estimator,
    group: &Group,
    env: &Environment,
    policy: &PolicyTable,
) -> Result<AdvantageTable> {
    match estimator {
        Estimator::Grpo => grpo_advantage(group),
        Estimator::Rloo => rloo_advantage(group),
        Estimator::OracleValue => oracle_value_advantage(group, env, policy),
    }
}
