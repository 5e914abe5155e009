//! Group policy-gradient training: clipped surrogate losses, exact response
//! regularizers, the modulation plug-in point and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{compute_advantage, AdvantageTable, Estimator};
use crate::aem::{modulate_batch, AemConfig, AemMode, ModulationSet, DEFAULT_EPSILON, DEFAULT_LAMBDA};
use crate::env::{EnvConfig, EnvState, Environment};
use crate::policy::{NodeKey, PolicyTable, Response, StateId};
use crate::rollout::{collect_group, filter_degenerate_groups, write_trajectory_records, FilterMode, Group};
use crate::stats::mean;
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Token-level clip, per-response length normalization.
    #[default]
    GrpoClip,
    /// Token-level clip aggregated over every token of the batch.
    DapoToken,
    /// Clip on the length-normalized sequence ratio.
    GspoSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psi {
    #[default]
    Identity,
    Log1p,
}

impl Psi {
    pub fn value(self, h: f64) -> f64 {
        match self {
            Psi::Identity => h,
            Psi::Log1p => h.ln_1p(),
        }
    }

    pub fn derivative(self, h: f64) -> f64 {
        match self {
            Psi::Identity => 1.0,
            Psi::Log1p => 1.0 / (1.0 + h),
        }
    }
}

/// Which responses have their gradient zeroed, by the sign of `A (alpha - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    None,
    /// `(alpha > 1, A > 0)` and `(alpha < 1, A < 0)`.
    MaskPosQuadrants,
    /// `(alpha > 1, A < 0)` and `(alpha < 1, A > 0)`.
    MaskNegQuadrants,
    /// Both of the above.
    MaskAllQuadrants,
}

impl MaskMode {
    /// Gradient weight of a response with base advantage `adv` and coefficient `alpha`.
    pub fn weight(self, adv: f64, alpha: f64) -> f64 {
        let sign = adv * (alpha - 1.0);
        let masked = match self {
            MaskMode::None => false,
            MaskMode::MaskPosQuadrants => sign > 0.0,
            MaskMode::MaskNegQuadrants => sign < 0.0,
            MaskMode::MaskAllQuadrants => sign != 0.0,
        };
        if masked {
            0.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub group_size: usize,
    pub lr: f64,
    /// Gradient passes over each batch.
    pub epochs: usize,
    /// Checkpoint cadence in steps; 0 keeps only the initial and final policy.
    pub checkpoint_every: usize,
    pub estimator: Estimator,
    pub aem_mode: AemMode,
    pub loss: LossKind,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
    pub psi: Psi,
    pub lambda: f64,
    pub epsilon: f64,
    pub filter: FilterMode,
    pub mask: MaskMode,
    /// Replace every coefficient by exactly one (diagnostics only).
    pub force_unit_alpha: bool,
    pub log_trajectories: bool,
    /// Log the exact trajectory entropy of the step's prompts when enumerable.
    pub log_exact_entropy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 60,
            prompts_per_step: 4,
            group_size: 8,
            lr: 0.05,
            epochs: 1,
            checkpoint_every: 0,
            estimator: Estimator::Grpo,
            aem_mode: AemMode::Aem,
            loss: LossKind::GrpoClip,
            clip_low: 0.2,
            clip_high: 0.2,
            kl_coef: 0.01,
            entropy_coef: 0.0,
            psi: Psi::Identity,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            filter: FilterMode::Off,
            mask: MaskMode::None,
            force_unit_alpha: false,
            log_trajectories: false,
            log_exact_entropy: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::config(format!("train.{field}: {why}")));
        if self.group_size < 2 {
            return bad("group_size", "must be at least 2");
        }
        if self.prompts_per_step == 0 {
            return bad("prompts_per_step", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a positive finite number");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(self.clip_low > 0.0 && self.clip_low < 1.0) {
            return bad("clip_low", "must lie in (0, 1)");
        }
        if !(self.clip_high > 0.0 && self.clip_high < 1.0) {
            return bad("clip_high", "must lie in (0, 1)");
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad("kl_coef", "must be non-negative");
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad("entropy_coef", "must be non-negative");
        }
        if !self.lambda.is_finite() {
            return bad("lambda", "must be finite");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be positive");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            clip_low: self.clip_low,
            clip_high: self.clip_high,
            kl_coef: self.kl_coef,
            entropy_coef: self.entropy_coef,
            psi: self.psi,
        }
    }

    pub fn aem_config(&self) -> AemConfig {
        AemConfig {
            mode: self.aem_mode,
            lambda: self.lambda,
            epsilon: self.epsilon,
        }
    }
}

/// A full run description: environment suite plus training settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        Environment::new(self.env.clone()).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
    pub psi: Psi,
}

impl Default for LossConfig {
    fn default() -> Self {
        TrainConfig::default().loss_config()
    }
}

/// One response as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub state: StateId,
    /// Tokens plus behavior log-probabilities recorded at sampling time.
    pub response: &'a Response,
    pub advantage: f64,
    /// 0 removes the response from every gradient term.
    pub weight: f64,
}

/// Sparse gradient with respect to the logits of visited nodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub entries: BTreeMap<NodeKey, Vec<f64>>,
}

impl Gradient {
    /// Adds `coef * (onehot(token) - probs)` at `key`.
    fn add_score(&mut self, key: NodeKey, token: usize, probs: &[f64], coef: f64) {
        if coef == 0.0 {
            return;
        }
        let g = self
            .entries
            .entry(key)
            .or_insert_with(|| vec![0.0; probs.len()]);
        for (gi, p) in g.iter_mut().zip(probs) {
            *gi -= coef * p;
        }
        g[token] += coef;
    }

    fn add_scaled(&mut self, other: &Gradient, coef: f64) {
        for (k, v) in &other.entries {
            let g = self
                .entries
                .entry(k.clone())
                .or_insert_with(|| vec![0.0; v.len()]);
            for (gi, vi) in g.iter_mut().zip(v) {
                *gi += coef * vi;
            }
        }
    }

    fn scale(&mut self, coef: f64) {
        for v in self.entries.values_mut() {
            for x in v {
                *x *= coef;
            }
        }
    }

    pub fn get(&self, key: &NodeKey) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().flatten().all(|&x| x == 0.0)
    }

    /// Gradient-descent step `theta -= lr * grad`.
    pub fn apply(&self, policy: &mut PolicyTable, lr: f64) -> Result<()> {
        for (key, g) in &self.entries {
            let z = policy.logits_mut(key)?;
            for (zi, gi) in z.iter_mut().zip(g) {
                *zi -= lr * gi;
            }
        }
        Ok(())
    }
}

/// Value and gradient of the training loss.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Clipped policy-gradient objective `J`.
    pub objective: f64,
    /// Regularizer value `R` (entropy bonus minus KL penalty).
    pub regularizer: f64,
    /// `-(J + R)`.
    pub loss: f64,
    pub gradient: Gradient,
}

fn clip_term(ratio: f64, adv: f64, low: f64, high: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - low, 1.0 + high) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// Exact `H_resp(s)` and `KL_resp(s || ref)` with their logit gradients.
pub struct StateRegularizer {
    pub entropy: f64,
    pub kl: f64,
    pub entropy_grad: Gradient,
    pub kl_grad: Gradient,
}

pub fn state_regularizer(
    policy: &PolicyTable,
    reference: &PolicyTable,
    state: StateId,
) -> Result<StateRegularizer> {
    let paths = policy.enumerate_responses(state)?;
    let ref_logp: Vec<f64> = paths
        .iter()
        .map(|a| reference.response_log_prob(state, &a.tokens))
        .collect::<Result<_>>()?;
    let entropy: f64 = paths.iter().map(|a| a.prob * a.surprisal()).sum();
    let kl: f64 = paths
        .iter()
        .zip(&ref_logp)
        .map(|(a, r)| a.prob * (a.log_prob - r))
        .sum();
    let mut entropy_grad = Gradient::default();
    let mut kl_grad = Gradient::default();
    for (a, r) in paths.iter().zip(&ref_logp) {
        let ch = a.prob * (a.surprisal() - entropy);
        let ck = a.prob * (a.log_prob - r - kl);
        for l in 0..a.tokens.len() {
            let node = policy.node(state, &a.tokens[..l])?;
            let key = NodeKey::new(state, &a.tokens[..l]);
            let y = a.tokens[l] as usize;
            entropy_grad.add_score(key.clone(), y, &node.probs, ch);
            kl_grad.add_score(key, y, &node.probs, ck);
        }
    }
    Ok(StateRegularizer {
        entropy,
        kl,
        entropy_grad,
        kl_grad,
    })
}

/// Loss `-(J + R)` and its analytic gradient at the current `policy`.
///
/// `J` is the clipped surrogate of `cfg.kind`; `R` averages
/// `beta psi(H_resp) - gamma KL_resp` over the responses' states with the
/// same per-response weights.
pub fn surrogate_loss(
    policy: &PolicyTable,
    samples: &[TrainSample<'_>],
    reference: &PolicyTable,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let mut gradient = Gradient::default();
    if samples.is_empty() {
        return Ok(LossOutput {
            objective: 0.0,
            regularizer: 0.0,
            loss: 0.0,
            gradient,
        });
    }
    let responses = samples.len() as f64;
    let tokens: usize = samples.iter().map(|s| s.response.len()).sum();
    let mut objective = 0.0;
    for s in samples {
        let r = s.response;
        if r.is_empty() || r.logprobs.len() != r.len() {
            return Err(Error::protocol("sample without behavior log-probabilities"));
        }
        let nodes: Vec<_> = (0..r.len())
            .map(|l| policy.node(s.state, &r.tokens[..l]))
            .collect::<Result<_>>()?;
        let log_ratio: Vec<f64> = nodes
            .iter()
            .zip(&r.tokens)
            .zip(&r.logprobs)
            .map(|((n, &y), old)| n.logprobs[y as usize] - old)
            .collect();
        let len = r.len() as f64;
        match cfg.kind {
            LossKind::GrpoClip | LossKind::DapoToken => {
                let norm = match cfg.kind {
                    LossKind::GrpoClip => responses * len,
                    _ => tokens as f64,
                };
                for (l, lr) in log_ratio.iter().enumerate() {
                    let ratio = lr.exp();
                    let (value, active) = clip_term(ratio, s.advantage, cfg.clip_low, cfg.clip_high);
                    objective += s.weight * value / norm;
                    if active {
                        let coef = s.weight * s.advantage * ratio / norm;
                        let key = NodeKey::new(s.state, &r.tokens[..l]);
                        gradient.add_score(key, r.tokens[l] as usize, &nodes[l].probs, coef);
                    }
                }
            }
            LossKind::GspoSeq => {
                let ratio = (log_ratio.iter().sum::<f64>() / len).exp();
                let (value, active) = clip_term(ratio, s.advantage, cfg.clip_low, cfg.clip_high);
                objective += s.weight * value / responses;
                if active {
                    let coef = s.weight * s.advantage * ratio / (responses * len);
                    for l in 0..r.len() {
                        let key = NodeKey::new(s.state, &r.tokens[..l]);
                        gradient.add_score(key, r.tokens[l] as usize, &nodes[l].probs, coef);
                    }
                }
            }
        }
    }

    let mut regularizer = 0.0;
    if cfg.entropy_coef > 0.0 || cfg.kl_coef > 0.0 {
        let mut state_weight: BTreeMap<StateId, f64> = BTreeMap::new();
        for s in samples {
            *state_weight.entry(s.state).or_default() += s.weight / responses;
        }
        for (&state, &w) in &state_weight {
            if w == 0.0 {
                continue;
            }
            let reg = state_regularizer(policy, reference, state)?;
            regularizer +=
                w * (cfg.entropy_coef * cfg.psi.value(reg.entropy) - cfg.kl_coef * reg.kl);
            let dh = w * cfg.entropy_coef * cfg.psi.derivative(reg.entropy);
            if dh != 0.0 {
                gradient.add_scaled(&reg.entropy_grad, dh);
            }
            if cfg.kl_coef > 0.0 {
                gradient.add_scaled(&reg.kl_grad, -w * cfg.kl_coef);
            }
        }
    }
    // The loss is the negated objective.
    gradient.scale(-1.0);
    Ok(LossOutput {
        objective,
        regularizer,
        loss: -(objective + regularizer),
        gradient,
    })
}

/// Flattens groups into loss samples, checking advantage and weight shapes.
pub fn build_samples<'a>(
    env: &Environment,
    groups: &'a [Group],
    advantages: &[AdvantageTable],
    weights: &[Vec<f64>],
) -> Result<Vec<TrainSample<'a>>> {
    if advantages.len() != groups.len() || weights.len() != groups.len() {
        return Err(Error::protocol("advantages or weights do not match the batch"));
    }
    let mut out = Vec::new();
    for ((g, adv), w) in groups.iter().zip(advantages).zip(weights) {
        adv.check_shape(g)?;
        if w.len() != g.spans.len() {
            return Err(Error::protocol("one weight per span required"));
        }
        for (span, &weight) in g.spans.iter().zip(w) {
            let turn = g.turn(span);
            out.push(TrainSample {
                state: env.policy_state(&turn.state),
                response: &turn.response,
                advantage: adv.values[span.rollout][span.turn],
                weight,
            });
        }
    }
    Ok(out)
}

/// Expected sum over turns of the response entropy, by exhaustive search.
pub fn exact_policy_entropy(policy: &PolicyTable, env: &Environment, task_id: usize) -> Result<f64> {
    fn go(
        policy: &PolicyTable,
        env: &Environment,
        s: &EnvState,
        memo: &mut HashMap<EnvState, f64>,
    ) -> Result<f64> {
        if s.done {
            return Ok(0.0);
        }
        if let Some(&v) = memo.get(s) {
            return Ok(v);
        }
        let paths = policy.enumerate_responses(env.policy_state(s))?;
        let mut v = 0.0;
        for a in &paths {
            let next = env.step(s, &a.tokens)?.state;
            v += a.prob * (a.surprisal() + go(policy, env, &next, memo)?);
        }
        memo.insert(s.clone(), v);
        Ok(v)
    }
    go(policy, env, &env.reset(task_id)?, &mut HashMap::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    /// Mean over the step's spans of the span entropy proxy.
    pub policy_entropy_estimate: f64,
    pub mean_alpha: f64,
    pub frac_positive_advantage: f64,
    pub loss_value: f64,
    /// Mean exact trajectory entropy of the step's prompts, if enumerable.
    pub exact_policy_entropy: Option<f64>,
    pub groups_kept: usize,
    pub masked_fraction: f64,
}

/// Per-span record of the modulation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationRecord {
    pub step: usize,
    pub prompt_id: usize,
    pub rollout: usize,
    pub turn: usize,
    pub h_bar: f64,
    pub h_tilde: Option<f64>,
    pub alpha: f64,
    pub base_advantage: f64,
    pub advantage: f64,
    pub surprisal: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub rollout: f64,
    pub advantage: f64,
    pub aem: f64,
    pub update: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.rollout + self.advantage + self.aem + self.update
    }

    fn add(&mut self, other: &PhaseTimings) {
        self.rollout += other.rollout;
        self.advantage += other.advantage;
        self.aem += other.aem;
        self.update += other.update;
    }
}

pub struct StepOutput {
    pub metrics: StepMetrics,
    pub modulation: Vec<ModulationRecord>,
    pub groups: Vec<Group>,
    pub timings: PhaseTimings,
}

/// Mutable training state: policy, frozen reference and generators.
pub struct Trainer {
    config: TrainConfig,
    env: Environment,
    policy: PolicyTable,
    reference: PolicyTable,
    rng: crate::Rng,
    aem_rng: crate::Rng,
    step: usize,
}

impl Trainer {
    pub fn new(exp: &ExperimentConfig) -> Result<Self> {
        exp.train.validate()?;
        let env = Environment::new(exp.env.clone())?;
        let policy = PolicyTable::new(env.vocab(), env.max_len())?;
        Self::with_policy(exp, policy)
    }

    /// Starts from a given policy, which also becomes the KL reference.
    pub fn with_policy(exp: &ExperimentConfig, policy: PolicyTable) -> Result<Self> {
        exp.train.validate()?;
        let env = Environment::new(exp.env.clone())?;
        if policy.vocab() != env.vocab() || policy.max_len() != env.max_len() {
            return Err(Error::config("policy does not fit the environment"));
        }
        let mut rng = seeded_rng(exp.train.seed);
        let aem_rng = seeded_rng(rng.random());
        Ok(Self {
            config: exp.train.clone(),
            reference: policy.clone(),
            policy,
            env,
            rng,
            aem_rng,
            step: 0,
        })
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn prompts(&self) -> Vec<usize> {
        let p = self.config.prompts_per_step;
        (0..p)
            .map(|j| (self.step * p + j) % self.env.task_count())
            .collect()
    }

    /// One rollout, advantage, modulation and update cycle.
    pub fn step(&mut self) -> Result<StepOutput> {
        let cfg = self.config.clone();
        let mut timings = PhaseTimings::default();

        let t0 = Instant::now();
        let prompts = self.prompts();
        let seeds: Vec<u64> = prompts.iter().map(|_| self.rng.random()).collect();
        let all_groups = prompts
            .par_iter()
            .zip(&seeds)
            .map(|(&p, &seed)| {
                collect_group(&self.policy, &self.env, p, cfg.group_size, &mut seeded_rng(seed))
            })
            .collect::<Result<Vec<_>>>()?;
        timings.rollout = t0.elapsed().as_secs_f64();

        let trajectories: Vec<_> = all_groups.iter().flat_map(|g| &g.trajectories).collect();
        let mean_reward = mean(&trajectories.iter().map(|t| t.reward).collect::<Vec<_>>());
        let success_rate = trajectories.iter().filter(|t| t.success).count() as f64
            / trajectories.len() as f64;
        let span_h: Vec<f64> = all_groups
            .iter()
            .map(crate::aem::group_h_bar)
            .collect::<Result<Vec<_>>>()?
            .concat();
        let policy_entropy_estimate = mean(&span_h);
        let exact_policy_entropy = if cfg.log_exact_entropy {
            self.exact_entropy(&prompts)
        } else {
            None
        };

        let groups = filter_degenerate_groups(all_groups, cfg.filter);

        let t1 = Instant::now();
        let base: Vec<AdvantageTable> = groups
            .iter()
            .map(|g| compute_advantage(cfg.estimator, g, &self.env, &self.policy))
            .collect::<Result<_>>()?;
        timings.advantage = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let aem_cfg = AemConfig {
            mode: if cfg.aem_mode == AemMode::Off && cfg.mask != MaskMode::None {
                AemMode::Aem
            } else {
                cfg.aem_mode
            },
            ..cfg.aem_config()
        };
        let mut sets = modulate_batch(&groups, &aem_cfg, &mut self.aem_rng)?;
        if cfg.force_unit_alpha {
            for s in &mut sets {
                s.alpha.fill(1.0);
            }
        }
        let apply = cfg.aem_mode != AemMode::Off;
        let (advantages, weights) = modulated_advantages(&base, &sets, apply, cfg.mask)?;
        timings.aem = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        let samples = build_samples(&self.env, &groups, &advantages, &weights)?;
        let mut loss_value = 0.0;
        for epoch in 0..cfg.epochs {
            let out = surrogate_loss(&self.policy, &samples, &self.reference, &cfg.loss_config())?;
            if epoch == 0 {
                loss_value = out.loss;
            }
            out.gradient.apply(&mut self.policy, cfg.lr)?;
        }
        timings.update = t3.elapsed().as_secs_f64();

        let mut modulation = Vec::new();
        for (((g, set), b), (a, w)) in groups
            .iter()
            .zip(&sets)
            .zip(&base)
            .zip(advantages.iter().zip(&weights))
        {
            for (k, span) in g.spans.iter().enumerate() {
                modulation.push(ModulationRecord {
                    step: self.step,
                    prompt_id: g.prompt_id,
                    rollout: span.rollout,
                    turn: span.turn,
                    h_bar: set.h_bar[k],
                    h_tilde: set.h_tilde[k],
                    alpha: set.alpha[k],
                    base_advantage: b.values[span.rollout][span.turn],
                    advantage: a.values[span.rollout][span.turn],
                    surprisal: g.response(span).recorded_surprisal(),
                    weight: w[k],
                });
            }
        }
        let n_spans = modulation.len();
        let frac = |pred: &dyn Fn(&ModulationRecord) -> bool| {
            if n_spans == 0 {
                0.0
            } else {
                modulation.iter().filter(|r| pred(r)).count() as f64 / n_spans as f64
            }
        };
        let metrics = StepMetrics {
            step: self.step,
            mean_reward,
            success_rate,
            policy_entropy_estimate,
            mean_alpha: if n_spans == 0 {
                1.0
            } else {
                modulation.iter().map(|r| r.alpha).sum::<f64>() / n_spans as f64
            },
            frac_positive_advantage: frac(&|r| r.advantage > 0.0),
            loss_value,
            exact_policy_entropy,
            groups_kept: groups.len(),
            masked_fraction: frac(&|r| r.weight == 0.0),
        };
        self.step += 1;
        Ok(StepOutput {
            metrics,
            modulation,
            groups,
            timings,
        })
    }

    fn exact_entropy(&self, prompts: &[usize]) -> Option<f64> {
        let values: Result<Vec<f64>> = prompts
            .iter()
            .map(|&p| exact_policy_entropy(&self.policy, &self.env, p))
            .collect();
        values.ok().map(|v| mean(&v))
    }
}

/// Applies coefficients (when `apply`) and builds per-span gradient weights from `mask`.
pub fn modulated_advantages(
    base: &[AdvantageTable],
    sets: &[ModulationSet],
    apply: bool,
    mask: MaskMode,
) -> Result<(Vec<AdvantageTable>, Vec<Vec<f64>>)> {
    let mut advantages = Vec::with_capacity(base.len());
    let mut weights = Vec::with_capacity(base.len());
    for (b, set) in base.iter().zip(sets) {
        let a = if apply {
            crate::aem::apply_modulation(b, set)?
        } else {
            b.clone()
        };
        let w = set
            .spans
            .iter()
            .zip(&set.alpha)
            .map(|(&(r, t), &alpha)| mask.weight(b.values[r][t], alpha))
            .collect();
        advantages.push(a);
        weights.push(w);
    }
    Ok((advantages, weights))
}

/// Aggregates of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// Mean success rate over the last quarter of steps.
    pub final_success_rate: f64,
    /// Mean reward over the last quarter of steps.
    pub final_mean_reward: f64,
    pub first_quartile_entropy: f64,
    pub last_quartile_entropy: f64,
}

/// Number of steps in one quarter of a run, at least one.
pub fn quartile_len(steps: usize) -> usize {
    (steps / 4).max(1)
}

impl RunSummary {
    pub fn from_metrics(metrics: &[StepMetrics]) -> Self {
        let n = metrics.len();
        if n == 0 {
            return Self {
                steps: 0,
                final_success_rate: 0.0,
                final_mean_reward: 0.0,
                first_quartile_entropy: 0.0,
                last_quartile_entropy: 0.0,
            };
        }
        let q = quartile_len(n);
        let head = &metrics[..q];
        let tail = &metrics[n - q..];
        let avg = |ms: &[StepMetrics], f: fn(&StepMetrics) -> f64| {
            ms.iter().map(f).sum::<f64>() / ms.len() as f64
        };
        Self {
            steps: n,
            final_success_rate: avg(tail, |m| m.success_rate),
            final_mean_reward: avg(tail, |m| m.mean_reward),
            first_quartile_entropy: avg(head, |m| m.policy_entropy_estimate),
            last_quartile_entropy: avg(tail, |m| m.policy_entropy_estimate),
        }
    }
}

/// Files written by [`train`] inside the output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODULATION_FILE: &str = "modulation.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub struct RunArtifacts {
    pub metrics: Vec<StepMetrics>,
    pub summary: RunSummary,
    pub policy: PolicyTable,
    pub timings: PhaseTimings,
    /// Per-step phase timings, in step order.
    pub step_timings: Vec<PhaseTimings>,
    /// Every file written, relative paths joined to the output directory.
    pub outputs: Vec<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize, W: Write>(out: &mut W, path: &Path, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Runs a full experiment; with `out_dir` it writes logs, checkpoints and the summary.
pub fn train(exp: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(exp)?;
    run(&mut trainer, exp.train.steps, out_dir)
}

/// Continues `trainer` for `steps` steps.
pub fn run(trainer: &mut Trainer, steps: usize, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    struct Sinks {
        metrics: (PathBuf, BufWriter<File>),
        modulation: (PathBuf, BufWriter<File>),
        trajectories: Option<(PathBuf, BufWriter<File>)>,
        ckpt_dir: PathBuf,
    }
    let mut outputs = Vec::new();
    let mut sinks = match out_dir {
        Some(dir) => {
            let ckpt_dir = dir.join(CHECKPOINT_DIR);
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            let open = |name: &str| -> Result<(PathBuf, BufWriter<File>)> {
                let p = dir.join(name);
                Ok((p.clone(), create(&p)?))
            };
            Some(Sinks {
                metrics: open(METRICS_FILE)?,
                modulation: open(MODULATION_FILE)?,
                trajectories: if trainer.config.log_trajectories {
                    Some(open(TRAJECTORY_FILE)?)
                } else {
                    None
                },
                ckpt_dir,
            })
        }
        None => None,
    };
    let checkpoint = |sinks: &Option<Sinks>, policy: &PolicyTable, step: usize, outputs: &mut Vec<PathBuf>| {
        if let Some(s) = sinks {
            let p = s.ckpt_dir.join(format!("step_{step:05}.json"));
            policy.save(&p)?;
            if !outputs.contains(&p) {
                outputs.push(p);
            }
        }
        Result::Ok(())
    };
    let start = trainer.steps_done();
    checkpoint(&sinks, &trainer.policy, start, &mut outputs)?;

    let mut metrics = Vec::with_capacity(steps);
    let mut timings = PhaseTimings::default();
    let mut step_timings = Vec::with_capacity(steps);
    for _ in 0..steps {
        let out = trainer.step()?;
        timings.add(&out.timings);
        step_timings.push(out.timings);
        if let Some(s) = sinks.as_mut() {
            write_jsonl(&mut s.metrics.1, &s.metrics.0, std::slice::from_ref(&out.metrics))?;
            write_jsonl(&mut s.modulation.1, &s.modulation.0, &out.modulation)?;
            if let Some((p, w)) = s.trajectories.as_mut() {
                write_trajectory_records(w, out.metrics.step, &out.groups)
                    .map_err(|e| match e {
                        Error::Io { source, .. } => Error::io(p.clone(), source),
                        other => other,
                    })?;
            }
        }
        let done = trainer.steps_done();
        let every = trainer.config.checkpoint_every;
        if every > 0 && done.is_multiple_of(every) {
            checkpoint(&sinks, &trainer.policy, done, &mut outputs)?;
        }
        metrics.push(out.metrics);
    }
    checkpoint(&sinks, &trainer.policy, trainer.steps_done(), &mut outputs)?;

    let summary = RunSummary::from_metrics(&metrics);
    if let (Some(s), Some(dir)) = (sinks, out_dir) {
        let mut files = vec![s.metrics, s.modulation];
        files.extend(s.trajectories);
        for (p, mut w) in files {
            w.flush().map_err(|e| Error::io(&p, e))?;
            outputs.push(p);
        }
        let p = dir.join(SUMMARY_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n")
            .map_err(|e| Error::io(&p, e))?;
        outputs.push(p);
    }
    Ok(RunArtifacts {
        metrics,
        summary,
        policy: trainer.policy.clone(),
        timings,
        step_timings,
        outputs,
    })
}
