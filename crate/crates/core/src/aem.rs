//! Entropy-aware response-level advantage modulation.
//!
//! For every response span the mean token entropy `h_bar` serves as a
//! predictable proxy of its surprisal. Within a normalization population
//! (by default the group of all responses generated from one prompt) the
//! proxies are min-max scaled to `h_tilde` and mapped through
//! `exp(-lambda * h_tilde)`, then divided by the population mean plus
//! `epsilon`. Populations whose proxy range is below [`DEGENERATE_RANGE`]
//! get `alpha = 1`. The base advantage of each span is multiplied by its
//! coefficient, uniformly over the span's tokens.
//!
//! Low-entropy spans therefore get `alpha > 1` and high-entropy spans
//! `alpha < 1`, with the population mean of `alpha` just under one.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::AdvantageTable;
use crate::rollout::Group;
use crate::{Error, Result};

/// Populations with `max(h_bar) - min(h_bar)` below this get `alpha = 1`.
pub const DEGENERATE_RANGE: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AemMode {
    Off,
    #[default]
    Aem,
    /// Temperature sign flipped: high-entropy spans are upweighted.
    Reverse,
    /// Standard coefficients permuted at random within each group.
    Shuffle,
    /// Each trajectory is its own normalization population.
    TrajNorm,
    /// All spans of the training step form one population.
    BatchNorm,
}

impl AemMode {
    pub const ALL: [AemMode; 6] = [
        AemMode::Off,
        AemMode::Aem,
        AemMode::Reverse,
        AemMode::Shuffle,
        AemMode::TrajNorm,
        AemMode::BatchNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AemMode::Off => "off",
            AemMode::Aem => "aem",
            AemMode::Reverse => "reverse",
            AemMode::Shuffle => "shuffle",
            AemMode::TrajNorm => "traj_norm",
            AemMode::BatchNorm => "batch_norm",
        }
    }
}

impl std::str::FromStr for AemMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AemMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown aem mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AemConfig {
    pub mode: AemMode,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for AemConfig {
    fn default() -> Self {
        Self {
            mode: AemMode::Aem,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Mean of the per-token entropies of one span.
pub fn response_entropy_proxy(entropies: &[f64]) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::protocol("entropy proxy of an empty span"));
    }
    Ok(entropies.iter().sum::<f64>() / entropies.len() as f64)
}

/// Result of min-max scaling one population.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMax {
    /// `None` when the population is degenerate.
    pub h_tilde: Option<Vec<f64>>,
    pub degenerate: bool,
}

pub fn group_minmax_normalize(h_bar: &[f64], epsilon: f64) -> MinMax {
    if h_bar.is_empty() {
        return MinMax {
            h_tilde: None,
            degenerate: true,
        };
    }
    let min = h_bar.iter().copied().fold(f64::INFINITY, f64::min);
    let max = h_bar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min < DEGENERATE_RANGE {
        return MinMax {
            h_tilde: None,
            degenerate: true,
        };
    }
    let h_tilde = h_bar
        .iter()
        .map(|h| (h - min) / (max - min + epsilon))
        .collect();
    MinMax {
        h_tilde: Some(h_tilde),
        degenerate: false,
    }
}

/// Self-calibrated coefficients `exp(-lambda h) / (mean(exp(-lambda h)) + epsilon)`.
pub fn modulation_coeffs(h_tilde: &[f64], lambda: f64, epsilon: f64) -> Vec<f64> {
    let raw: Vec<f64> = h_tilde.iter().map(|h| (-lambda * h).exp()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|a| a / (mean + epsilon)).collect()
}

/// Min-max scaling plus coefficients for one population.
pub fn population_coeffs(h_bar: &[f64], lambda: f64, epsilon: f64) -> (MinMax, Vec<f64>) {
    let mm = group_minmax_normalize(h_bar, epsilon);
    let alpha = match &mm.h_tilde {
        Some(ht) => modulation_coeffs(ht, lambda, epsilon),
        None => vec![1.0; h_bar.len()],
    };
    (mm, alpha)
}

/// Per-span modulation values of one group, in the group's span order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationSet {
    /// `(rollout, turn)` of each entry.
    pub spans: Vec<(usize, usize)>,
    pub h_bar: Vec<f64>,
    /// `None` for spans of a degenerate population.
    pub h_tilde: Vec<Option<f64>>,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    pub epsilon: f64,
    /// Every population touching this group was degenerate.
    pub degenerate: bool,
}

impl ModulationSet {
    fn identity(group: &Group, h_bar: Vec<f64>, cfg: &AemConfig) -> Self {
        Self {
            spans: span_keys(group),
            h_tilde: vec![None; h_bar.len()],
            alpha: vec![1.0; h_bar.len()],
            h_bar,
            lambda: cfg.lambda,
            epsilon: cfg.epsilon,
            degenerate: true,
        }
    }

    pub fn alpha_at(&self, rollout: usize, turn: usize) -> Option<f64> {
        self.spans
            .iter()
            .position(|&k| k == (rollout, turn))
            .map(|i| self.alpha[i])
    }

    pub fn mean_alpha(&self) -> f64 {
        self.alpha.iter().sum::<f64>() / self.alpha.len() as f64
    }

    /// Reorders the coefficients: entry `i` receives `alpha[perm[i]]`.
    pub fn permute_alpha(&mut self, perm: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.alpha.len()];
        if perm.len() != self.alpha.len() || perm.iter().any(|&p| p >= seen.len()) {
            return Err(Error::protocol("permutation does not match span count"));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::protocol("permutation repeats an index"));
            }
        }
        self.alpha = perm.iter().map(|&p| self.alpha[p]).collect();
        Ok(())
    }
}

fn span_keys(group: &Group) -> Vec<(usize, usize)> {
    group.spans.iter().map(|s| (s.rollout, s.turn)).collect()
}

/// Entropy proxy of every span of a group, in span order.
pub fn group_h_bar(group: &Group) -> Result<Vec<f64>> {
    group
        .spans
        .iter()
        .map(|s| response_entropy_proxy(&group.response(s).entropies))
        .collect()
}

/// Standard group-normalized modulation with temperature `lambda`.
pub fn modulate_group(group: &Group, lambda: f64, epsilon: f64) -> Result<ModulationSet> {
    let h_bar = group_h_bar(group)?;
    let (mm, alpha) = population_coeffs(&h_bar, lambda, epsilon);
    let h_tilde = match mm.h_tilde {
        Some(ht) => ht.into_iter().map(Some).collect(),
        None => vec![None; h_bar.len()],
    };
    Ok(ModulationSet {
        spans: span_keys(group),
        h_bar,
        h_tilde,
        alpha,
        lambda,
        epsilon,
        degenerate: mm.degenerate,
    })
}

fn modulate_per_trajectory(group: &Group, cfg: &AemConfig) -> Result<ModulationSet> {
    let h_bar = group_h_bar(group)?;
    let mut set = ModulationSet::identity(group, h_bar, cfg);
    let mut degenerate = true;
    let mut start = 0;
    for t in &group.trajectories {
        let end = start + t.turns.len();
        let (mm, alpha) = population_coeffs(&set.h_bar[start..end], cfg.lambda, cfg.epsilon);
        set.alpha[start..end].copy_from_slice(&alpha);
        if let Some(ht) = mm.h_tilde {
            for (slot, h) in set.h_tilde[start..end].iter_mut().zip(ht) {
                *slot = Some(h);
            }
        }
        degenerate &= mm.degenerate;
        start = end;
    }
    set.degenerate = degenerate;
    Ok(set)
}

fn modulate_whole_batch(groups: &[Group], cfg: &AemConfig) -> Result<Vec<ModulationSet>> {
    let per_group: Vec<Vec<f64>> = groups.iter().map(group_h_bar).collect::<Result<_>>()?;
    let pooled: Vec<f64> = per_group.iter().flatten().copied().collect();
    let (mm, alpha) = population_coeffs(&pooled, cfg.lambda, cfg.epsilon);
    let mut offset = 0;
    let mut out = Vec::with_capacity(groups.len());
    for (group, h_bar) in groups.iter().zip(per_group) {
        let n = h_bar.len();
        let mut set = ModulationSet::identity(group, h_bar, cfg);
        set.alpha.copy_from_slice(&alpha[offset..offset + n]);
        if let Some(ht) = &mm.h_tilde {
            set.h_tilde = ht[offset..offset + n].iter().map(|&h| Some(h)).collect();
        }
        set.degenerate = mm.degenerate;
        out.push(set);
        offset += n;
    }
    Ok(out)
}

/// Coefficients for every group of a training step under `cfg.mode`.
///
/// `rng` is only consumed by the shuffle variant.
pub fn modulate_batch<R: Rng + ?Sized>(
    groups: &[Group],
    cfg: &AemConfig,
    rng: &mut R,
) -> Result<Vec<ModulationSet>> {
    match cfg.mode {
        AemMode::Off => groups
            .iter()
            .map(|g| Ok(ModulationSet::identity(g, group_h_bar(g)?, cfg)))
            .collect(),
        AemMode::Aem => groups
            .iter()
            .map(|g| modulate_group(g, cfg.lambda, cfg.epsilon))
            .collect(),
        AemMode::Reverse => groups
            .iter()
            .map(|g| modulate_group(g, -cfg.lambda, cfg.epsilon))
            .collect(),
        AemMode::Shuffle => groups
            .iter()
            .map(|g| {
                let mut set = modulate_group(g, cfg.lambda, cfg.epsilon)?;
                set.alpha.shuffle(rng);
                Ok(set)
            })
            .collect(),
        AemMode::TrajNorm => groups
            .iter()
            .map(|g| modulate_per_trajectory(g, cfg))
            .collect(),
        AemMode::BatchNorm => modulate_whole_batch(groups, cfg),
    }
}

/// `A_aem = alpha * A_base`, span by span.
pub fn apply_modulation(base: &AdvantageTable, set: &ModulationSet) -> Result<AdvantageTable> {
    let expected: usize = base.values.iter().map(Vec::len).sum();
    if set.spans.len() != expected {
        return Err(Error::protocol(format!(
            "{} coefficients for {expected} spans",
            set.spans.len()
        )));
    }
    let mut out = base.clone();
    let mut covered = 0;
    for (&(r, t), &a) in set.spans.iter().zip(&set.alpha) {
        let slot = out
            .values
            .get_mut(r)
            .and_then(|row| row.get_mut(t))
            .ok_or_else(|| Error::protocol(format!("coefficient for unknown span ({r}, {t})")))?;
        *slot *= a;
        covered += 1;
    }
    debug_assert_eq!(covered, expected);
    Ok(out)
}

/// Modulated advantages of a batch of groups under the standard rule.
pub fn aem_advantages(
    groups: &[Group],
    base: &[AdvantageTable],
    lambda: f64,
    epsilon: f64,
) -> Result<Vec<AdvantageTable>> {
    if groups.len() != base.len() {
        return Err(Error::protocol("one advantage table per group required"));
    }
    groups
        .iter()
        .zip(base)
        .map(|(g, b)| apply_modulation(b, &modulate_group(g, lambda, epsilon)?))
        .collect()
}
