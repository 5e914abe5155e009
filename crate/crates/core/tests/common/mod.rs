#![allow(dead_code)]

use aemlab::env::EnvState;
use aemlab::policy::{PolicyTable, Response, StateId, Token, Vocabulary};
use aemlab::rollout::{Group, Trajectory, Turn};
use rand::Rng;

/// Every non-terminal prefix of the response tree.
pub fn prefixes(vocab: usize, terminator: Token, max_len: usize) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 1..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for y in 0..vocab as Token {
                if y == terminator {
                    continue;
                }
                let mut q: Vec<Token> = p.clone();
                q.push(y);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Policy with independent N(0, scale^2)-ish logits at every node of `states`.
pub fn random_policy<R: Rng>(
    rng: &mut R,
    vocab: usize,
    max_len: usize,
    states: &[StateId],
    scale: f64,
) -> PolicyTable {
    let v = Vocabulary::new(vocab, (vocab - 1) as Token).unwrap();
    let mut policy = PolicyTable::new(v, max_len).unwrap();
    for &s in states {
        for p in prefixes(vocab, v.terminator(), max_len) {
            let z = (0..vocab).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
            policy.set_logits(s, &p, z).unwrap();
        }
    }
    policy
}

fn dummy_state() -> EnvState {
    EnvState {
        task_id: 0,
        step_index: 0,
        features: vec![0],
        done: false,
        success: false,
    }
}

/// A group whose spans carry the given per-token entropies; `turns[i]` lists
/// the entropy vectors of trajectory `i`.
pub fn synthetic_group(turns: &[Vec<Vec<f64>>], rewards: &[f64]) -> Group {
    let trajectories = turns
        .iter()
        .zip(rewards)
        .map(|(ts, &reward)| Trajectory {
            prompt_id: 0,
            seed: 0,
            turns: ts
                .iter()
                .map(|ent| Turn {
                    state: dummy_state(),
                    response: Response {
                        tokens: vec![0; ent.len()],
                        logprobs: vec![-0.5; ent.len()],
                        entropies: ent.clone(),
                    },
                    valid: true,
                })
                .collect(),
            final_state: EnvState {
                done: true,
                ..dummy_state()
            },
            invalid_count: 0,
            reward,
            success: reward > 0.0,
        })
        .collect();
    Group::from_trajectories(0, trajectories).unwrap()
}

/// Random group: 2..=8 trajectories, 1..=4 turns each, 1..=5 tokens per span.
pub fn random_group<R: Rng>(rng: &mut R, entropy_scale: f64) -> Group {
    let n = rng.random_range(2..=8);
    let turns: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| {
            (0..rng.random_range(1..=4))
                .map(|_| {
                    (0..rng.random_range(1..=5))
                        .map(|_| entropy_scale * rng.random::<f64>())
                        .collect()
                })
                .collect()
        })
        .collect();
    let rewards: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 10.0 } else { 0.0 }).collect();
    synthetic_group(&turns, &rewards)
}
