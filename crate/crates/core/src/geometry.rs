//! Fisher-Rao geometry of the response simplex and entropy-drift identities,
//! with finite-difference oracles for each identity.
//!
//! On the open simplex the Fisher-Rao metric is `g(u, v) = sum u v / pi`.
//! Pairing the natural gradient of the response entropy with the natural
//! gradient of a per-response objective gives the entropy drift caused by
//! reinforcing that response.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::trainer::Psi;
use crate::{seeded_rng, Error, Result};

/// Tangent vectors must sum to zero within this tolerance.
pub const TANGENT_TOL: f64 = 1e-9;
pub const DEFAULT_FD_STEP: f64 = 1e-6;
/// Below this minimum probability a point counts as near a vertex.
pub const INTERIOR_FLOOR: f64 = 1e-4;

/// Strictly interior point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint {
    probs: Vec<f64>,
}

impl SimplexPoint {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::config("simplex point needs at least two responses"));
        }
        if probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::config("simplex point must be strictly positive"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("simplex point sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `S_a = -ln pi_a` for every response.
    pub fn surprisals(&self) -> Vec<f64> {
        self.probs.iter().map(|p| -p.ln()).collect()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    /// `Var_pi(S)`.
    pub fn surprisal_variance(&self) -> f64 {
        self.surprisal_covariance(self)
    }

    /// `Cov_pi(S, S_ref)`, both surprisals taken under `pi = self`.
    pub fn surprisal_covariance(&self, reference: &SimplexPoint) -> f64 {
        let s = self.surprisals();
        let r = reference.surprisals();
        let ms: f64 = self.probs.iter().zip(&s).map(|(p, x)| p * x).sum();
        let mr: f64 = self.probs.iter().zip(&r).map(|(p, x)| p * x).sum();
        self.probs
            .iter()
            .zip(s.iter().zip(&r))
            .map(|(p, (x, y))| p * (x - ms) * (y - mr))
            .sum()
    }
}

/// Shannon entropy of a positive vector, in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|p| p * p.ln()).sum::<f64>()
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

fn check_tangent(v: &[f64]) -> Result<()> {
    let s: f64 = v.iter().sum();
    if s.abs() > TANGENT_TOL {
        return Err(Error::protocol(format!("vector is not tangent (sum {s:e})")));
    }
    Ok(())
}

/// `g_pi(u, v) = sum_a u_a v_a / pi_a` on tangent vectors.
pub fn fisher_rao_inner(pi: &SimplexPoint, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != pi.len() || v.len() != pi.len() {
        return Err(Error::protocol("tangent vector length differs from the simplex"));
    }
    check_tangent(u)?;
    check_tangent(v)?;
    Ok(u.iter()
        .zip(v)
        .zip(&pi.probs)
        .map(|((a, b), p)| a * b / p)
        .sum())
}

/// Riemannian gradient `pi * (grad - (pi . grad) 1)`.
pub fn natural_gradient(pi: &SimplexPoint, euclidean: &[f64]) -> Vec<f64> {
    let centre: f64 = pi.probs.iter().zip(euclidean).map(|(p, g)| p * g).sum();
    pi.probs
        .iter()
        .zip(euclidean)
        .map(|(p, g)| p * (g - centre))
        .collect()
}

/// Euclidean gradient of the entropy in ambient coordinates, `S - 1`.
pub fn entropy_euclidean_gradient(pi: &SimplexPoint) -> Vec<f64> {
    pi.surprisals().into_iter().map(|s| s - 1.0).collect()
}

/// Entropy drift `A (S_a - H)` of reinforcing response `a` with advantage `A`.
pub fn resp_entropy_drift(pi: &SimplexPoint, a: usize, advantage: f64) -> f64 {
    advantage * (-pi.probs[a].ln() - pi.entropy())
}

/// The same drift computed as an explicit Fisher-Rao inner product.
pub fn resp_entropy_drift_explicit(pi: &SimplexPoint, a: usize, advantage: f64) -> Result<f64> {
    let grad_h = natural_gradient(pi, &entropy_euclidean_gradient(pi));
    let mut score = vec![0.0; pi.len()];
    score[a] = advantage / pi.probs[a];
    let grad_l = natural_gradient(pi, &score);
    fisher_rao_inner(pi, &grad_h, &grad_l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftConfig {
    pub advantage: f64,
    pub beta: f64,
    pub gamma: f64,
    pub psi: Psi,
    /// Required when `gamma > 0`.
    pub reference: Option<SimplexPoint>,
}

impl DriftConfig {
    pub fn plain(advantage: f64) -> Self {
        Self {
            advantage,
            beta: 0.0,
            gamma: 0.0,
            psi: Psi::Identity,
            reference: None,
        }
    }

    fn check(&self, n: usize) -> Result<Option<&SimplexPoint>> {
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::config("beta and gamma must be non-negative"));
        }
        match &self.reference {
            Some(r) if r.len() != n => Err(Error::config("reference has a different support")),
            None if self.gamma > 0.0 => Err(Error::config("gamma > 0 requires a reference policy")),
            r => Ok(r.as_ref()),
        }
    }
}

/// Decomposition of the regularized drift into its three parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizedDrift {
    pub total: f64,
    /// Reward-driven part `A (S_a - H)`.
    pub reward_term: f64,
    /// Entropy-expanding part `(beta psi'(H) + gamma) Var(S)`, never negative.
    pub expansion_term: f64,
    /// Reference-alignment part `-gamma Cov(S, S_ref)`.
    pub alignment_term: f64,
}

pub fn regularized_drift(pi: &SimplexPoint, a: usize, cfg: &DriftConfig) -> Result<RegularizedDrift> {
    let reference = cfg.check(pi.len())?;
    let h = pi.entropy();
    let reward_term = resp_entropy_drift(pi, a, cfg.advantage);
    let expansion_term = (cfg.beta * cfg.psi.derivative(h) + cfg.gamma) * pi.surprisal_variance();
    let alignment_term = match reference {
        Some(r) if cfg.gamma != 0.0 => -cfg.gamma * pi.surprisal_covariance(r),
        _ => 0.0,
    };
    Ok(RegularizedDrift {
        total: reward_term + expansion_term + alignment_term,
        reward_term,
        expansion_term,
        alignment_term,
    })
}

/// The per-response objective `A ln pi_a + beta psi(H) - gamma KL(pi || ref)`
/// evaluated on an unnormalized positive vector.
fn regularized_objective(x: &[f64], a: usize, cfg: &DriftConfig) -> f64 {
    let h = entropy(x);
    let mut v = cfg.advantage * x[a].ln() + cfg.beta * cfg.psi.value(h);
    if let Some(r) = &cfg.reference {
        v -= cfg.gamma * kl_divergence(x, r.probs());
    }
    v
}

/// `sum_t P[s_t = s] D(s)` over the visited states.
pub fn occupancy_weighted_drift(drifts: &[f64], visitation: &[f64]) -> Result<f64> {
    if drifts.len() != visitation.len() {
        return Err(Error::protocol("one visitation probability per drift required"));
    }
    if visitation.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::protocol("visitation probability outside [0, 1]"));
    }
    Ok(drifts.iter().zip(visitation).map(|(d, p)| d * p).sum())
}

/// Softmax policy over a response set with shared linear features:
/// `pi = softmax(W theta)`, `W` of shape `responses x params`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSoftmax {
    pub features: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

impl SharedSoftmax {
    pub fn new(features: Vec<Vec<f64>>, theta: Vec<f64>) -> Result<Self> {
        if features.len() < 2 || features.iter().any(|row| row.len() != theta.len()) {
            return Err(Error::config("feature matrix must be responses x params"));
        }
        Ok(Self { features, theta })
    }

    /// One parameter per response, no sharing.
    pub fn tabular(theta: Vec<f64>) -> Self {
        let n = theta.len();
        let features = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { features, theta }
    }

    pub fn responses(&self) -> usize {
        self.features.len()
    }

    pub fn params(&self) -> usize {
        self.theta.len()
    }

    pub fn probs_at(&self, theta: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = self
            .features
            .iter()
            .map(|row| row.iter().zip(theta).map(|(w, t)| w * t).sum())
            .collect();
        crate::policy::softmax(&z)
    }

    pub fn probs(&self) -> Vec<f64> {
        self.probs_at(&self.theta)
    }

    /// Score vectors `G_b = grad_theta ln pi_b = W^T (e_b - pi)`.
    pub fn scores(&self) -> Vec<Vec<f64>> {
        let pi = self.probs();
        let mean_feature: Vec<f64> = (0..self.params())
            .map(|k| self.features.iter().zip(&pi).map(|(row, p)| p * row[k]).sum())
            .collect();
        self.features
            .iter()
            .map(|row| row.iter().zip(&mean_feature).map(|(w, m)| w - m).collect())
            .collect()
    }

    /// Policy-gradient kernel `K(b, c) = <G_b, G_c>`.
    pub fn kernel(&self) -> Vec<Vec<f64>> {
        let g = self.scores();
        g.iter()
            .map(|gb| g.iter().map(|gc| dot(gb, gc)).collect())
            .collect()
    }

    /// `grad_theta H_resp = sum_b pi_b (S_b - H) G_b`.
    pub fn entropy_gradient(&self) -> Vec<f64> {
        let pi = self.probs();
        let h = entropy(&pi);
        let g = self.scores();
        let mut out = vec![0.0; self.params()];
        for (p, gb) in pi.iter().zip(&g) {
            let c = p * (-p.ln() - h);
            for (o, x) in out.iter_mut().zip(gb) {
                *o += c * x;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametrizedDrift {
    pub total: f64,
    /// `-A [pi_a (H - S_a) K(a, a) + B_ker]`.
    pub task_term: f64,
    /// Cross-response residual `sum_{b != a} pi_b (H - S_b) K(b, a)`.
    pub cross_term: f64,
    /// `sum_{b,c} pi_b pi_c (S_b - H)(S_c - H) K(b, c)`.
    pub variance: f64,
    /// `sum_{b,c} pi_b pi_c (S_b - H)(S_ref_c - E S_ref) K(b, c)`.
    pub covariance: f64,
}

pub fn parametrized_drift(
    policy: &SharedSoftmax,
    a: usize,
    cfg: &DriftConfig,
) -> Result<ParametrizedDrift> {
    let reference = cfg.check(policy.responses())?;
    let pi = policy.probs();
    let s: Vec<f64> = pi.iter().map(|p| -p.ln()).collect();
    let h = entropy(&pi);
    let k = policy.kernel();
    let m = pi.len();

    let cross_term: f64 = (0..m)
        .filter(|&b| b != a)
        .map(|b| pi[b] * (h - s[b]) * k[b][a])
        .sum();
    let task_term = -cfg.advantage * (pi[a] * (h - s[a]) * k[a][a] + cross_term);

    let centred: Vec<f64> = pi.iter().zip(&s).map(|(p, x)| p * (x - h)).collect();
    let quad = |u: &[f64], v: &[f64]| -> f64 {
        (0..m)
            .map(|b| (0..m).map(|c| u[b] * v[c] * k[b][c]).sum::<f64>())
            .sum()
    };
    let variance = quad(&centred, &centred);
    let covariance = match reference {
        Some(r) => {
            let sr = r.surprisals();
            let mr: f64 = pi.iter().zip(&sr).map(|(p, x)| p * x).sum();
            let cr: Vec<f64> = pi.iter().zip(&sr).map(|(p, x)| p * (x - mr)).collect();
            quad(&centred, &cr)
        }
        None => 0.0,
    };
    let total = task_term + (cfg.beta * cfg.psi.derivative(h) + cfg.gamma) * variance
        - cfg.gamma * covariance;
    Ok(ParametrizedDrift {
        total,
        task_term,
        cross_term,
        variance,
        covariance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Resp,
    Regularized,
    Parametrized,
}

impl std::str::FromStr for DriftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resp" => Ok(DriftKind::Resp),
            "regularized" => Ok(DriftKind::Regularized),
            "parametrized" => Ok(DriftKind::Parametrized),
            _ => Err(Error::config(format!("unknown drift kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-8 }
    }
}

impl Tolerance {
    /// Passes when either the relative or the absolute bound holds.
    pub fn accepts(&self, abs_error: f64, rel_error: f64) -> bool {
        abs_error <= self.abs || rel_error <= self.rel
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub kind: DriftKind,
    pub trial: usize,
    pub responses: usize,
    pub sampled: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub fd_step: f64,
    pub min_prob: f64,
    /// Near-vertex trials are reported but not held to the tolerance.
    pub asserted: bool,
    pub passed: bool,
}

impl DriftReport {
    fn new(
        kind: DriftKind,
        trial: usize,
        sampled: usize,
        min_prob: f64,
        responses: usize,
        analytic: f64,
        finite_difference: f64,
        fd_step: f64,
        tol: &Tolerance,
    ) -> Self {
        let abs_error = (analytic - finite_difference).abs();
        let rel_error = abs_error / finite_difference.abs().max(f64::MIN_POSITIVE);
        Self {
            kind,
            trial,
            responses,
            sampled,
            analytic,
            finite_difference,
            abs_error,
            rel_error,
            fd_step,
            min_prob,
            asserted: min_prob >= INTERIOR_FLOOR,
            passed: tol.accepts(abs_error, rel_error),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub min_responses: usize,
    pub max_responses: usize,
    /// Advantages are drawn uniformly from `[-max_advantage, max_advantage]`.
    pub max_advantage: f64,
    pub max_beta: f64,
    pub max_gamma: f64,
    pub psi: Psi,
    pub tolerance: Tolerance,
    /// Sample points with one probability of about 1e-6 instead of interior ones.
    pub near_vertex: bool,
    /// Deliberately wrong analytic formula, for harness self-tests.
    pub corrupt: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            min_responses: 3,
            max_responses: 10,
            max_advantage: 2.0,
            max_beta: 1.0,
            max_gamma: 0.1,
            psi: Psi::Identity,
            tolerance: Tolerance::default(),
            near_vertex: false,
            corrupt: false,
        }
    }
}

/// Symmetric Dirichlet(1) sample by normalized exponentials.
pub fn sample_dirichlet<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = x.iter().sum();
    x.into_iter().map(|v| v / total).collect()
}

/// Dirichlet(1) sample conditioned on every probability being at least `floor`.
pub fn sample_interior<R: Rng + ?Sized>(n: usize, floor: f64, rng: &mut R) -> SimplexPoint {
    loop {
        let p = sample_dirichlet(n, rng);
        if p.iter().all(|&x| x >= floor) {
            if let Ok(pt) = SimplexPoint::new(p) {
                return pt;
            }
        }
    }
}

/// A point with one response at probability about 1e-6.
pub fn sample_near_vertex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SimplexPoint {
    let mut p = sample_dirichlet(n, rng);
    let k = rng.random_range(0..n);
    p[k] = 1e-6;
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    let fix = 1.0 - p.iter().sum::<f64>();
    let j = (k + 1) % n;
    p[j] += fix;
    SimplexPoint::new(p).expect("positive by construction")
}

/// Central difference of `f` along `dir` from `x`, with the retraction
/// `normalize(max(x + h dir, tiny))`.
fn simplex_directional_fd(x: &[f64], dir: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let retract = |t: f64| -> Vec<f64> {
        let y: Vec<f64> = x
            .iter()
            .zip(dir)
            .map(|(a, d)| (a + t * d).max(f64::MIN_POSITIVE))
            .collect();
        let total: f64 = y.iter().sum();
        y.into_iter().map(|v| v / total).collect()
    };
    (f(&retract(h)) - f(&retract(-h))) / (2.0 * h)
}

/// Ambient central-difference gradient of `f` at a positive vector.
fn ambient_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].max(1e-3);
            y[i] = x[i] + step;
            let up = f(&y);
            y[i] = x[i] - step;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn uniform_in<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn simplex_trial(
    kind: DriftKind,
    trial: usize,
    seed: u64,
    fd_step: f64,
    opts: &VerifyOptions,
) -> Result<DriftReport> {
    let mut rng = seeded_rng(seed);
    let n = rng.random_range(opts.min_responses..=opts.max_responses);
    let pi = if opts.near_vertex {
        sample_near_vertex(n, &mut rng)
    } else {
        sample_interior(n, INTERIOR_FLOOR, &mut rng)
    };
    let a = rng.random_range(0..n);
    let advantage = uniform_in(-opts.max_advantage, opts.max_advantage, &mut rng);
    let cfg = match kind {
        DriftKind::Resp => DriftConfig::plain(advantage),
        _ => DriftConfig {
            advantage,
            beta: uniform_in(0.0, opts.max_beta, &mut rng),
            gamma: uniform_in(0.0, opts.max_gamma, &mut rng),
            psi: opts.psi,
            reference: Some(sample_interior(n, INTERIOR_FLOOR, &mut rng)),
        },
    };
    let mut analytic = match kind {
        DriftKind::Resp => resp_entropy_drift(&pi, a, advantage),
        _ => regularized_drift(&pi, a, &cfg)?.total,
    };
    if opts.corrupt {
        analytic = advantage * (-pi.probs()[a].ln() + pi.entropy()) + 1.0;
    }
    // Direction: natural gradient of the objective, with its Euclidean
    // gradient itself taken by finite differences.
    let euclid = ambient_gradient(pi.probs(), fd_step, |x| regularized_objective(x, a, &cfg));
    let dir = natural_gradient(&pi, &euclid);
    let fd = simplex_directional_fd(pi.probs(), &dir, fd_step, entropy);
    Ok(DriftReport::new(
        kind,
        trial,
        a,
        pi.min_prob(),
        n,
        analytic,
        fd,
        fd_step,
        &opts.tolerance,
    ))
}

fn parametrized_trial(trial: usize, seed: u64, fd_step: f64, opts: &VerifyOptions) -> Result<DriftReport> {
    let mut rng = seeded_rng(seed);
    let m = rng.random_range(opts.min_responses.max(3)..=opts.max_responses.max(3));
    let p = rng.random_range(2..m);
    let features: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let theta: Vec<f64> = (0..p)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        })
        .collect();
    let policy = SharedSoftmax::new(features, theta)?;
    let a = rng.random_range(0..m);
    let advantage = uniform_in(-opts.max_advantage, opts.max_advantage, &mut rng);
    let cfg = DriftConfig {
        advantage,
        beta: uniform_in(0.0, opts.max_beta, &mut rng),
        gamma: uniform_in(0.0, opts.max_gamma, &mut rng),
        psi: opts.psi,
        reference: Some(sample_interior(m, INTERIOR_FLOOR, &mut rng)),
    };
    let mut analytic = parametrized_drift(&policy, a, &cfg)?.total;
    if opts.corrupt {
        analytic = -analytic + 1.0;
    }
    let (g_ell, fd) = parametrized_fd(&policy, a, &cfg, fd_step);
    debug_assert_eq!(g_ell.len(), p);
    let min_prob = policy.probs().into_iter().fold(f64::INFINITY, f64::min);
    Ok(DriftReport::new(
        DriftKind::Parametrized,
        trial,
        a,
        min_prob,
        m,
        analytic,
        fd,
        fd_step,
        &opts.tolerance,
    ))
}

/// Euclidean finite-difference oracle for the parametrized drift:
/// returns the FD gradient of the objective and the FD derivative of the
/// entropy along it.
pub fn parametrized_fd(
    policy: &SharedSoftmax,
    a: usize,
    cfg: &DriftConfig,
    h: f64,
) -> (Vec<f64>, f64) {
    let objective = |theta: &[f64]| regularized_objective(&policy.probs_at(theta), a, cfg);
    let mut theta = policy.theta.clone();
    let grad: Vec<f64> = (0..theta.len())
        .map(|k| {
            let t0 = theta[k];
            theta[k] = t0 + h;
            let up = objective(&theta);
            theta[k] = t0 - h;
            let down = objective(&theta);
            theta[k] = t0;
            (up - down) / (2.0 * h)
        })
        .collect();
    let shifted = |t: f64| -> Vec<f64> {
        policy
            .theta
            .iter()
            .zip(&grad)
            .map(|(x, g)| x + t * g)
            .collect()
    };
    let fd = (entropy(&policy.probs_at(&shifted(h))) - entropy(&policy.probs_at(&shifted(-h))))
        / (2.0 * h);
    (grad, fd)
}

/// Compares analytic drifts with finite-difference derivatives on random trials.
pub fn verify_drift_fd<R: Rng + ?Sized>(
    kind: DriftKind,
    trials: usize,
    fd_step: f64,
    opts: &VerifyOptions,
    rng: &mut R,
) -> Result<Vec<DriftReport>> {
    if !(fd_step > 0.0) {
        return Err(Error::config("fd_step must be positive"));
    }
    if opts.min_responses < 2 || opts.max_responses < opts.min_responses {
        return Err(Error::config("invalid response-count range"));
    }
    let seeds: Vec<u64> = (0..trials).map(|_| rng.random()).collect();
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| match kind {
            DriftKind::Parametrized => parametrized_trial(i, seed, fd_step, opts),
            _ => simplex_trial(kind, i, seed, fd_step, opts),
        })
        .collect()
}
