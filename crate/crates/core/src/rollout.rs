//! Trajectories, response spans and prompt groups.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, Environment};
use crate::policy::{PolicyTable, Response, Token};
use crate::{seeded_rng, Error, Result};

/// One turn: the state the agent saw and the response it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub state: EnvState,
    pub response: Response,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Task id of the prompt that started the episode.
    pub prompt_id: usize,
    /// Seed of the generator that produced the episode.
    pub seed: u64,
    pub turns: Vec<Turn>,
    pub final_state: EnvState,
    pub invalid_count: usize,
    pub reward: f64,
    pub success: bool,
}

impl Trajectory {
    pub fn token_count(&self) -> usize {
        self.turns.iter().map(|t| t.response.len()).sum()
    }

    /// All generated tokens in order.
    pub fn token_stream(&self) -> Vec<Token> {
        self.turns
            .iter()
            .flat_map(|t| t.response.tokens.iter().copied())
            .collect()
    }
}

/// Runs one episode of `task_id` under `policy`, driven by a generator seeded with `seed`.
pub fn rollout_trajectory(
    policy: &PolicyTable,
    env: &Environment,
    task_id: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = seeded_rng(seed);
    let mut state = env.reset(task_id)?;
    let mut turns = Vec::new();
    let mut invalid_count = 0;
    while !state.done {
        let response = policy.sample_response(env.policy_state(&state), &mut rng);
        let out = env.step(&state, &response.tokens)?;
        if !out.valid {
            invalid_count += 1;
        }
        turns.push(Turn {
            state,
            response,
            valid: out.valid,
        });
        state = out.state;
    }
    let success = state.success;
    Ok(Trajectory {
        prompt_id: task_id,
        seed,
        turns,
        reward: env.reward_scheme().outcome_reward(success, invalid_count),
        final_state: state,
        invalid_count,
        success,
    })
}

/// Inclusive token range of one turn inside a trajectory's token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSpan {
    pub rollout: usize,
    pub turn: usize,
    pub begin: usize,
    pub end: usize,
}

impl ResponseSpan {
    pub fn len(&self) -> usize {
        self.end + 1 - self.begin
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One span per turn; spans partition the trajectory's token stream.
pub fn parse_spans(rollout: usize, trajectory: &Trajectory) -> Vec<ResponseSpan> {
    let mut begin = 0;
    trajectory
        .turns
        .iter()
        .enumerate()
        .map(|(turn, t)| {
            let span = ResponseSpan {
                rollout,
                turn,
                begin,
                end: begin + t.response.len() - 1,
            };
            begin += t.response.len();
            span
        })
        .collect()
}

/// All trajectories generated from one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: usize,
    pub trajectories: Vec<Trajectory>,
    pub spans: Vec<ResponseSpan>,
}

impl Group {
    pub fn from_trajectories(prompt_id: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(t) = trajectories.iter().find(|t| t.prompt_id != prompt_id) {
            return Err(Error::protocol(format!(
                "trajectory of prompt {} placed in group {prompt_id}",
                t.prompt_id
            )));
        }
        let spans = trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| parse_spans(i, t))
            .collect();
        Ok(Self {
            prompt_id,
            trajectories,
            spans,
        })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    pub fn successes(&self) -> Vec<bool> {
        self.trajectories.iter().map(|t| t.success).collect()
    }

    pub fn response(&self, span: &ResponseSpan) -> &Response {
        &self.trajectories[span.rollout].turns[span.turn].response
    }

    pub fn turn(&self, span: &ResponseSpan) -> &Turn {
        &self.trajectories[span.rollout].turns[span.turn]
    }
}

/// Samples `n` independent trajectories of one prompt.
///
/// Rollout seeds are drawn from `rng` up front, so the result does not
/// depend on how rollouts are scheduled across threads.
pub fn collect_group<R: Rng + ?Sized>(
    policy: &PolicyTable,
    env: &Environment,
    prompt_id: usize,
    n: usize,
    rng: &mut R,
) -> Result<Group> {
    if n < 2 {
        return Err(Error::config(format!("group size {n} < 2")));
    }
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let trajectories = seeds
        .par_iter()
        .map(|&seed| rollout_trajectory(policy, env, prompt_id, seed))
        .collect::<Result<Vec<_>>>()?;
    Group::from_trajectories(prompt_id, trajectories)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    #[default]
    Off,
    RejectUniform,
}

/// Drops groups whose success indicators are all equal when `mode` asks for it.
pub fn filter_degenerate_groups(groups: Vec<Group>, mode: FilterMode) -> Vec<Group> {
    match mode {
        FilterMode::Off => groups,
        FilterMode::RejectUniform => groups
            .into_iter()
            .filter(|g| {
                let s = g.successes();
                s.iter().any(|&x| x != s[0])
            })
            .collect(),
    }
}

/// Line record of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub prompt_id: usize,
    pub seed: u64,
    pub tokens: Vec<Vec<Token>>,
    pub logprobs: Vec<Vec<f64>>,
    pub entropies: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
    pub reward: f64,
    pub success: bool,
}

impl TrajectoryRecord {
    pub fn new(step: usize, t: &Trajectory) -> Self {
        Self {
            step,
            prompt_id: t.prompt_id,
            seed: t.seed,
            tokens: t.turns.iter().map(|x| x.response.tokens.clone()).collect(),
            logprobs: t.turns.iter().map(|x| x.response.logprobs.clone()).collect(),
            entropies: t.turns.iter().map(|x| x.response.entropies.clone()).collect(),
            valid: t.turns.iter().map(|x| x.valid).collect(),
            reward: t.reward,
            success: t.success,
        }
    }
}

pub fn write_trajectory_records<W: Write>(
    out: &mut W,
    step: usize,
    groups: &[Group],
) -> Result<()> {
    for g in groups {
        for t in &g.trajectories {
            serde_json::to_writer(&mut *out, &TrajectoryRecord::new(step, t))?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("<trajectory log>", e))?;
        }
    }
    Ok(())
}
