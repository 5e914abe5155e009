//! Deterministic multi-turn environments with sparse outcome rewards.
//!
//! Each environment interprets a whole response (its token sequence up to
//! the terminator) as one action. Three kinds are provided:
//!
//! - `key-chain`: a task holds `key_count` secret keys of `key_len` tokens;
//!   the agent must emit them in order, one key per turn.
//! - `grid-fetch`: a response is a short sequence of moves on a small grid;
//!   the episode succeeds when the agent stands on the goal cell.
//! - `bandit-chain`: a response picks one arm per turn; a wrong arm ends the
//!   episode, `depth` correct picks in a row succeed.
//!
//! Episodes end on success, failure or when `horizon` turns are used up.

use std::collections::{HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{response_count, StateId, Token, Vocabulary};
use crate::rollout::Trajectory;
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    KeyChain,
    GridFetch,
    BanditChain,
}

impl EnvKind {
    fn tag(self) -> i64 {
        match self {
            EnvKind::KeyChain => 1,
            EnvKind::GridFetch => 2,
            EnvKind::BanditChain => 3,
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key-chain" => Ok(EnvKind::KeyChain),
            "grid-fetch" => Ok(EnvKind::GridFetch),
            "bandit-chain" => Ok(EnvKind::BanditChain),
            other => Err(Error::config(format!("unknown environment kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardScheme {
    pub success_reward: f64,
    pub failure_reward: f64,
    /// Added once per invalid response (negative for a penalty).
    pub invalid_penalty: f64,
}

impl Default for RewardScheme {
    fn default() -> Self {
        Self {
            success_reward: 10.0,
            failure_reward: 0.0,
            invalid_penalty: -0.1,
        }
    }
}

impl RewardScheme {
    /// 1 for success, 0 otherwise, no invalid penalty.
    pub fn binary() -> Self {
        Self {
            success_reward: 1.0,
            failure_reward: 0.0,
            invalid_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.success_reward > self.failure_reward) {
            return Err(Error::config("success_reward must exceed failure_reward"));
        }
        Ok(())
    }

    pub fn outcome_reward(&self, success: bool, invalid_count: usize) -> f64 {
        let base = if success {
            self.success_reward
        } else {
            self.failure_reward
        };
        base + self.invalid_penalty * invalid_count as f64
    }
}

/// `R(tau)` for a terminated trajectory.
pub fn terminal_reward(trajectory: &Trajectory, scheme: &RewardScheme) -> Result<f64> {
    if !trajectory.final_state.done {
        return Err(Error::protocol("reward requested for a non-terminated trajectory"));
    }
    Ok(scheme.outcome_reward(trajectory.success, trajectory.invalid_count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub task_count: usize,
    pub horizon: usize,
    /// Seed of the task layouts (keys, grid endpoints, arm sequences).
    pub seed: u64,
    pub reward: RewardScheme,
    /// key-chain: number of keys per task.
    pub key_count: usize,
    /// key-chain: tokens per key.
    pub key_len: usize,
    /// key-chain: number of non-terminator symbols.
    pub alphabet: usize,
    /// grid-fetch: side length of the square grid.
    pub grid_size: usize,
    /// grid-fetch: maximum moves per response.
    pub max_moves: usize,
    /// bandit-chain: number of arms.
    pub arms: usize,
    /// bandit-chain: correct picks needed.
    pub depth: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::KeyChain,
            task_count: 8,
            horizon: 8,
            seed: 7,
            reward: RewardScheme::default(),
            key_count: 2,
            key_len: 2,
            alphabet: 3,
            grid_size: 3,
            max_moves: 2,
            arms: 2,
            depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub task_id: usize,
    pub step_index: usize,
    /// key-chain: `[keys solved]`; grid-fetch: `[x, y]`; bandit-chain: `[picks]`.
    pub features: Vec<i64>,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Task {
    KeyChain { keys: Vec<Vec<Token>> },
    GridFetch { start: (i64, i64), goal: (i64, i64) },
    BanditChain { arms: Vec<Token> },
}

#[derive(Debug, Clone)]
pub struct Environment {
    config: EnvConfig,
    vocab: Vocabulary,
    max_len: usize,
    tasks: Vec<Task>,
}

impl Environment {
    /// Builds the task suite and checks every task is solvable within the horizon.
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.reward.validate()?;
        if config.task_count == 0 {
            return Err(Error::config("task_count must be positive"));
        }
        if config.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        let (vocab, max_len) = match config.kind {
            EnvKind::KeyChain => {
                if config.alphabet < 1 || config.key_len < 1 || config.key_count < 1 {
                    return Err(Error::config("key-chain needs alphabet, key_len, key_count >= 1"));
                }
                (
                    Vocabulary::new(config.alphabet + 1, config.alphabet as Token)?,
                    config.key_len,
                )
            }
            EnvKind::GridFetch => {
                if config.grid_size < 2 || config.max_moves < 1 {
                    return Err(Error::config("grid-fetch needs grid_size >= 2 and max_moves >= 1"));
                }
                (Vocabulary::new(5, 4)?, config.max_moves)
            }
            EnvKind::BanditChain => {
                if config.arms < 2 || config.depth < 1 {
                    return Err(Error::config("bandit-chain needs arms >= 2 and depth >= 1"));
                }
                (Vocabulary::new(config.arms + 1, config.arms as Token)?, 1)
            }
        };
        let tasks = (0..config.task_count)
            .map(|id| Self::make_task(&config, id))
            .collect();
        let env = Self {
            config,
            vocab,
            max_len,
            tasks,
        };
        for id in 0..env.config.task_count {
            if !env.success_reachable(id)? {
                return Err(Error::config(format!(
                    "task {id} has no success path within horizon {}",
                    env.config.horizon
                )));
            }
        }
        Ok(env)
    }

    fn make_task(config: &EnvConfig, id: usize) -> Task {
        let mut rng = seeded_rng(
            StateId::from_parts(&[config.kind.tag(), id as i64, config.seed as i64]).0,
        );
        match config.kind {
            EnvKind::KeyChain => Task::KeyChain {
                keys: (0..config.key_count)
                    .map(|_| {
                        (0..config.key_len)
                            .map(|_| rng.random_range(0..config.alphabet) as Token)
                            .collect()
                    })
                    .collect(),
            },
            EnvKind::GridFetch => {
                let n = config.grid_size as i64;
                let start = (rng.random_range(0..n), rng.random_range(0..n));
                let mut goal = start;
                while goal == start {
                    goal = (rng.random_range(0..n), rng.random_range(0..n));
                }
                Task::GridFetch { start, goal }
            }
            EnvKind::BanditChain => Task::BanditChain {
                arms: (0..config.depth)
                    .map(|_| rng.random_range(0..config.arms) as Token)
                    .collect(),
            },
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn kind(&self) -> EnvKind {
        self.config.kind
    }

    pub fn task_count(&self) -> usize {
        self.config.task_count
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn reward_scheme(&self) -> &RewardScheme {
        &self.config.reward
    }

    /// Vocabulary a policy must use to act in this environment.
    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    /// Response length cap a policy must use to act in this environment.
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// The secret keys of a key-chain task.
    pub fn keys(&self, task_id: usize) -> Option<&[Vec<Token>]> {
        match self.tasks.get(task_id)? {
            Task::KeyChain { keys } => Some(keys),
            _ => None,
        }
    }

    pub fn reset(&self, task_id: usize) -> Result<EnvState> {
        let task = self.tasks.get(task_id).ok_or_else(|| {
            Error::config(format!(
                "task_id {task_id} out of range (task_count {})",
                self.config.task_count
            ))
        })?;
        let features = match task {
            Task::KeyChain { .. } | Task::BanditChain { .. } => vec![0],
            Task::GridFetch { start, .. } => vec![start.0, start.1],
        };
        Ok(EnvState {
            task_id,
            step_index: 0,
            features,
            done: false,
            success: false,
        })
    }

    /// Identifier of the observation the policy conditions on.
    ///
    /// The step index is not observed, so the same situation at different
    /// turns shares one policy state.
    pub fn policy_state(&self, state: &EnvState) -> StateId {
        let mut parts = vec![self.config.kind.tag(), state.task_id as i64];
        parts.extend_from_slice(&state.features);
        StateId::from_parts(&parts)
    }

    /// Tokens before the first terminator.
    fn content<'a>(&self, response: &'a [Token]) -> &'a [Token] {
        let end = response
            .iter()
            .position(|&y| y == self.vocab.terminator())
            .unwrap_or(response.len());
        &response[..end]
    }

    pub fn step(&self, state: &EnvState, response: &[Token]) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::protocol("step called on a finished episode"));
        }
        let task = self
            .tasks
            .get(state.task_id)
            .ok_or_else(|| Error::protocol(format!("unknown task {}", state.task_id)))?;
        if response.is_empty() || response.len() > self.max_len {
            return Err(Error::protocol(format!(
                "response length {} outside 1..={}",
                response.len(),
                self.max_len
            )));
        }
        let content = self.content(response);
        let mut next = state.clone();
        next.step_index += 1;
        let mut valid = true;
        match task {
            Task::KeyChain { keys } => {
                if content.len() != self.config.key_len {
                    valid = false;
                } else {
                    let solved = next.features[0] as usize;
                    if content == keys[solved].as_slice() {
                        next.features[0] += 1;
                        if solved + 1 == keys.len() {
                            next.done = true;
                            next.success = true;
                        }
                    }
                }
            }
            Task::GridFetch { goal, .. } => {
                let n = self.config.grid_size as i64;
                let (mut x, mut y) = (next.features[0], next.features[1]);
                if content.is_empty() {
                    valid = false;
                }
                for &mv in content {
                    let (dx, dy) = match mv {
                        0 => (0, -1),
                        1 => (0, 1),
                        2 => (-1, 0),
                        _ => (1, 0),
                    };
                    x += dx;
                    y += dy;
                    if x < 0 || y < 0 || x >= n || y >= n {
                        valid = false;
                        break;
                    }
                }
                if valid {
                    next.features = vec![x, y];
                    if (x, y) == *goal {
                        next.done = true;
                        next.success = true;
                    }
                }
            }
            Task::BanditChain { arms } => {
                if content.len() != 1 {
                    valid = false;
                } else {
                    let picks = next.features[0] as usize;
                    if content[0] == arms[picks] {
                        next.features[0] += 1;
                        if picks + 1 == arms.len() {
                            next.done = true;
                            next.success = true;
                        }
                    } else {
                        next.done = true;
                    }
                }
            }
        }
        if !next.done && next.step_index >= self.config.horizon {
            next.done = true;
        }
        Ok(StepOutcome { state: next, valid })
    }

    /// Every token sequence the policy can emit as one response.
    pub fn response_space(&self) -> Vec<Vec<Token>> {
        let mut out = Vec::with_capacity(response_count(self.vocab.size(), self.max_len) as usize);
        let mut prefix = Vec::new();
        self.collect_responses(&mut prefix, &mut out);
        out
    }

    fn collect_responses(&self, prefix: &mut Vec<Token>, out: &mut Vec<Vec<Token>>) {
        for y in 0..self.vocab.size() as Token {
            prefix.push(y);
            if y == self.vocab.terminator() || prefix.len() == self.max_len {
                out.push(prefix.clone());
            } else {
                self.collect_responses(prefix, out);
            }
            prefix.pop();
        }
    }

    /// Breadth-first search over the reachable state graph.
    pub fn success_reachable(&self, task_id: usize) -> Result<bool> {
        let responses = self.response_space();
        let start = self.reset(task_id)?;
        let mut seen = HashSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            if !seen.insert(s.clone()) {
                continue;
            }
            for a in &responses {
                let next = self.step(&s, a)?.state;
                if next.success {
                    return Ok(true);
                }
                if !next.done {
                    queue.push_back(next);
                }
            }
        }
        Ok(false)
    }
}
