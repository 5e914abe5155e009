mod common;

use aemlab::aem::DEFAULT_EPSILON;
use aemlab::policy::{PolicyTable, StateId, Vocabulary};
use aemlab::probes::{consistency_pairs, consistency_probe, doob_exact, doob_probe, transition_tracker};
use aemlab::seeded_rng;
use aemlab::trainer::StepMetrics;
use common::random_policy;
use aemlab::Error;

#[test]
fn deterministic_policy_gives_no_nonzero_pairs() {
    let v = Vocabulary::new(3, 2).unwrap();
    let mut policy = PolicyTable::new(v, 2).unwrap();
    let states = [StateId(1), StateId(2)];
    for &s in &states {
        policy.set_logits(s, &[], vec![-1e9, -1e9, 0.0]).unwrap();
    }
    let r = consistency_probe(&policy, &states, 16, 1.0, DEFAULT_EPSILON, &mut seeded_rng(0)).unwrap();
    assert!(r.pairs.iter().all(|&(a, d)| a == 0.0 && d == 0.0));
    assert_eq!(r.nonzero_pairs, 0);
    assert_eq!(r.sign_agreement, None);
    assert_eq!(r.pearson_r, None);
}

#[test]
fn too_few_pairs_is_a_statistics_error() {
    let policy = PolicyTable::new(Vocabulary::new(2, 1).unwrap(), 1).unwrap();
    let err = consistency_probe(&policy, &[StateId(0)], 1, 1.0, DEFAULT_EPSILON, &mut seeded_rng(0));
    assert!(matches!(err, Err(Error::Statistics(_))));
}

#[test]
fn two_point_state_matches_hand_computation() {
    // First token: stop (terminator 1) with prob 1/2 or emit 0 with prob 1/2.
    // After 0 the node is nearly deterministic.
    let v = Vocabulary::new(2, 1).unwrap();
    let mut policy = PolicyTable::new(v, 2).unwrap();
    let s = StateId(7);
    policy.set_logits(s, &[0], vec![0.0, -40.0]).unwrap();
    let k = 32;
    let pairs = consistency_pairs(&policy, s, k, 1.0, DEFAULT_EPSILON, &mut seeded_rng(3)).unwrap();
    let replay: Vec<_> = {
        let mut rng = seeded_rng(3);
        (0..k).map(|_| policy.sample_response(s, &mut rng)).collect()
    };
    let ln2 = std::f64::consts::LN_2;
    let short = replay.iter().filter(|r| r.len() == 1).count() as f64;
    let long = k as f64 - short;
    assert!(short > 0.0 && long > 0.0);
    // surprisal ln 2 for both responses (second token has prob ~1), so the
    // Monte-Carlo deviation is zero to rounding
    // proxies: ln 2 for short, (ln 2 + ~0)/2 for long, range ln2/2 >= 0.1
    let h_short = ln2;
    let h_long = (ln2 + 0.0) / 2.0;
    let range = h_short - h_long;
    let raw_short = (-(h_short - h_long) / (range + DEFAULT_EPSILON)).exp();
    let raw_long = 1.0f64;
    let m = (short * raw_short + long * raw_long) / k as f64;
    for (r, (a, d)) in replay.iter().zip(&pairs) {
        let expect = if r.len() == 1 { raw_short / (m + DEFAULT_EPSILON) } else { raw_long / (m + DEFAULT_EPSILON) };
        assert!((a + 1.0 - expect).abs() < 1e-9);
        assert!(d.abs() < 1e-9);
    }
}

#[test]
fn exact_residuals_vanish() {
    let mut rng = seeded_rng(8);
    for _ in 0..10 {
        let s = StateId(rng_u64(&mut rng));
        let policy = random_policy(&mut rng, 4, 3, &[s], 3.0);
        for r in doob_exact(&policy, s).unwrap() {
            assert!(r.residual.abs() < 1e-12, "{:?}", r);
        }
    }
}

fn rng_u64(rng: &mut aemlab::Rng) -> u64 {
    use rand::Rng;
    rng.random()
}

#[test]
fn martingale_residual_examples() {
    let v = Vocabulary::new(2, 1).unwrap();
    let mut policy = PolicyTable::new(v, 1).unwrap();
    let s = StateId(0);
    let uniform = doob_probe(&policy, s, 1000, &mut seeded_rng(1)).unwrap();
    assert_eq!(uniform.residual_mean, 0.0);
    assert!(uniform.passed);

    policy.set_logits(s, &[], vec![(0.9f64 / 0.1).ln(), 0.0]).unwrap();
    let skewed = doob_probe(&policy, s, 100_000, &mut seeded_rng(2)).unwrap();
    assert!(skewed.passed, "{skewed:?}");
    assert!(skewed.residual_stderr > 0.0);

    let det = {
        let mut p = PolicyTable::new(v, 1).unwrap();
        p.set_logits(s, &[], vec![0.0, -1e9]).unwrap();
        doob_probe(&p, s, 100, &mut seeded_rng(3)).unwrap()
    };
    assert_eq!(det.residual_mean, 0.0);
    assert!(det.passed);
    assert!(doob_probe(&policy, s, 0, &mut seeded_rng(0)).is_err());
}

fn metrics(entropy: &[f64], success: &[f64]) -> Vec<StepMetrics> {
    entropy
        .iter()
        .zip(success)
        .enumerate()
        .map(|(i, (&h, &s))| StepMetrics {
            step: i,
            mean_reward: 10.0 * s,
            success_rate: s,
            policy_entropy_estimate: h,
            mean_alpha: 1.0,
            frac_positive_advantage: s / 2.0,
            loss_value: 0.0,
            exact_policy_entropy: None,
            groups_kept: 1,
            masked_fraction: 0.0,
        })
        .collect()
}

#[test]
fn transition_summary_on_synthetic_logs() {
    let base = metrics(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3], &[0.0, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    let aem = metrics(&[1.2, 1.1, 0.9, 0.7, 0.5, 0.3, 0.2, 0.1], &[0.0, 0.1, 0.1, 0.2, 0.4, 0.5, 0.6, 0.8]);
    let t = transition_tracker(&base, &aem).unwrap();
    assert!((t.baseline.first_quartile_entropy - 0.95).abs() < 1e-12);
    assert!((t.treatment.first_quartile_entropy - 1.15).abs() < 1e-12);
    assert!((t.first_quartile_entropy_diff - 0.2).abs() < 1e-12);
    assert!((t.last_quartile_entropy_diff - (0.15 - 0.35)).abs() < 1e-12);
    assert!((t.last_quartile_success_diff - (0.7 - 0.55)).abs() < 1e-12);
    assert_eq!(t.treatment.frac_positive_advantage.len(), 8);

    let same = transition_tracker(&base, &base).unwrap();
    assert_eq!(same.first_quartile_entropy_diff, 0.0);
    assert_eq!(same.last_quartile_entropy_diff, 0.0);
    assert_eq!(same.last_quartile_success_diff, 0.0);

    assert!(matches!(transition_tracker(&base, &aem[..7]), Err(Error::Protocol(_))));
}
