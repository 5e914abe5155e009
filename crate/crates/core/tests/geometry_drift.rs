use aemlab::geometry::{
    entropy, fisher_rao_inner, kl_divergence, natural_gradient, occupancy_weighted_drift,
    parametrized_drift, parametrized_fd, regularized_drift, resp_entropy_drift,
    resp_entropy_drift_explicit, sample_interior, verify_drift_fd, DriftConfig, DriftKind,
    SharedSoftmax, SimplexPoint, VerifyOptions, DEFAULT_FD_STEP,
};
use aemlab::seeded_rng;
use aemlab::trainer::Psi;
use proptest::prelude::*;
use rand::Rng;

fn tangent<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = v.iter().sum::<f64>() / n as f64;
    v.iter_mut().for_each(|x| *x -= m);
    v
}

#[test]
fn duality_on_random_probes() {
    let mut rng = seeded_rng(2);
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let pi = sample_interior(n, 1e-4, &mut rng);
        let grad: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let xi = tangent(n, &mut rng);
        let nat = natural_gradient(&pi, &grad);
        let lhs = fisher_rao_inner(&pi, &nat, &xi).unwrap();
        let rhs: f64 = grad.iter().zip(&xi).map(|(g, x)| g * x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn kl_is_locally_half_the_metric() {
    let mut rng = seeded_rng(3);
    for _ in 0..20 {
        let n = rng.random_range(3..=8);
        let pi = sample_interior(n, 1e-2, &mut rng);
        let dir = tangent(n, &mut rng);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut ratios = Vec::new();
        for scale in [1e-3, 1e-4, 1e-5] {
            let d: Vec<f64> = dir.iter().map(|x| x * scale / norm).collect();
            let moved: Vec<f64> = pi.probs().iter().zip(&d).map(|(p, x)| p + x).collect();
            let gap = (kl_divergence(&moved, pi.probs()) - 0.5 * fisher_rao_inner(&pi, &d, &d).unwrap()).abs();
            ratios.push(gap / (scale * scale));
        }
        // the normalized gap shrinks linearly with the scale
        assert!(ratios[1] < ratios[0] * 0.2 + 1e-9, "{ratios:?}");
        assert!(ratios[2] < ratios[1] * 0.2 + 1e-9, "{ratios:?}");
    }
}

#[test]
fn regularized_reduces_and_self_reference_cancels() {
    let pi = SimplexPoint::new(vec![0.5, 0.3, 0.2]).unwrap();
    let plain = regularized_drift(&pi, 1, &DriftConfig::plain(0.7)).unwrap();
    assert_eq!(plain.total, resp_entropy_drift(&pi, 1, 0.7));
    let cfg = DriftConfig {
        advantage: 0.7,
        beta: 0.0,
        gamma: 0.3,
        psi: Psi::Identity,
        reference: Some(pi.clone()),
    };
    let d = regularized_drift(&pi, 1, &cfg).unwrap();
    assert!((d.expansion_term + d.alignment_term).abs() < 1e-15);
}

#[test]
fn tabular_kernel_has_softmax_structure() {
    let mut rng = seeded_rng(4);
    for _ in 0..20 {
        let n = rng.random_range(3..=7);
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = SharedSoftmax::tabular(theta);
        let pi = model.probs();
        let sq: f64 = pi.iter().map(|p| p * p).sum();
        let k = model.kernel();
        for b in 0..n {
            for c in 0..n {
                let delta = if b == c { 1.0 } else { 0.0 };
                assert!((k[b][c] - (delta - pi[b] - pi[c] + sq)).abs() < 1e-12);
            }
        }
        let a = rng.random_range(0..n);
        let d = parametrized_drift(&model, a, &DriftConfig::plain(1.0)).unwrap();
        let h = entropy(&pi);
        let direct: f64 = (0..n)
            .filter(|&b| b != a)
            .map(|b| pi[b] * (h - (-pi[b].ln())) * (if b == a { 1.0 } else { 0.0 } - pi[b] - pi[a] + sq))
            .sum();
        assert!((d.cross_term - direct).abs() < 1e-12);
    }
}

#[test]
fn parametrized_variance_is_squared_entropy_gradient() {
    let mut rng = seeded_rng(5);
    for _ in 0..50 {
        let m = rng.random_range(3..=8);
        let p = rng.random_range(2..m);
        let features = (0..m).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let theta = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = SharedSoftmax::new(features, theta).unwrap();
        let cfg = DriftConfig {
            advantage: rng.random_range(-1.0..1.0),
            beta: 0.4,
            gamma: 0.05,
            psi: Psi::Identity,
            reference: Some(sample_interior(m, 1e-4, &mut rng)),
        };
        let a = rng.random_range(0..m);
        let d = parametrized_drift(&model, a, &cfg).unwrap();
        let g = model.entropy_gradient();
        assert!((d.variance - g.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-10);
        let zero = parametrized_drift(&model, a, &DriftConfig::plain(0.0)).unwrap();
        assert_eq!(zero.total, 0.0);
        let (_, fd) = parametrized_fd(&model, a, &cfg, DEFAULT_FD_STEP);
        assert!((d.total - fd).abs() <= 1e-8f64.max(1e-4 * fd.abs()));
    }
}

/// A three-state chain: from state 0 response 0 moves to state 1 and
/// response 1 to state 2; both later states are terminal after one response.
#[test]
fn occupancy_weights_match_trajectory_enumeration() {
    let pi0 = SimplexPoint::new(vec![0.6, 0.4]).unwrap();
    let pi1 = SimplexPoint::new(vec![0.2, 0.5, 0.3]).unwrap();
    let pi2 = SimplexPoint::new(vec![0.9, 0.1]).unwrap();
    let (d0, d1, d2) = (
        resp_entropy_drift(&pi0, 0, 1.0),
        resp_entropy_drift(&pi1, 2, -0.5),
        resp_entropy_drift(&pi2, 1, 2.0),
    );
    let via_visits = occupancy_weighted_drift(&[d0, d1, d2], &[1.0, 0.6, 0.4]).unwrap();
    // enumerate the six trajectories and sum the drift of each state visited
    let mut by_paths = 0.0;
    for (first, p_first) in [(1usize, 0.6), (2usize, 0.4)] {
        let second = if first == 1 { &pi1 } else { &pi2 };
        for p_second in second.probs() {
            let d_second = if first == 1 { d1 } else { d2 };
            by_paths += p_first * p_second * (d0 + d_second);
        }
    }
    assert!((via_visits - by_paths).abs() < 1e-10);
}

#[test]
fn near_vertex_trials_are_flagged() {
    let opts = VerifyOptions { near_vertex: true, ..VerifyOptions::default() };
    let reports = verify_drift_fd(DriftKind::Resp, 50, 1e-6, &opts, &mut seeded_rng(1)).unwrap();
    assert!(reports.iter().all(|r| !r.asserted));
}

#[test]
fn corrupted_formula_is_caught() {
    let opts = VerifyOptions { corrupt: true, ..VerifyOptions::default() };
    for kind in [DriftKind::Resp, DriftKind::Regularized, DriftKind::Parametrized] {
        let reports = verify_drift_fd(kind, 20, 1e-6, &opts, &mut seeded_rng(1)).unwrap();
        assert!(reports.iter().any(|r| !r.passed));
    }
}

#[test]
fn harness_passes_on_all_kinds() {
    for kind in [DriftKind::Resp, DriftKind::Regularized, DriftKind::Parametrized] {
        let reports = verify_drift_fd(kind, 200, 1e-6, &VerifyOptions::default(), &mut seeded_rng(9)).unwrap();
        let worst = reports.iter().filter(|r| r.asserted).map(|r| r.rel_error.min(r.abs_error / 1e-8 * 1e-4)).fold(0.0, f64::max);
        assert!(reports.iter().filter(|r| r.asserted).all(|r| r.passed), "{kind:?} worst {worst}");
    }
}

proptest! {
    #[test]
    fn natural_gradient_is_tangent(seed in any::<u64>(), scale in 0.1f64..100.0) {
        let mut rng = seeded_rng(seed);
        let n = rng.random_range(2..=10);
        let pi = sample_interior(n, 1e-4, &mut rng);
        let g: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let nat = natural_gradient(&pi, &g);
        prop_assert!(nat.iter().sum::<f64>().abs() < 1e-12 * scale.max(1.0));
        let constant = natural_gradient(&pi, &vec![scale; n]);
        prop_assert!(constant.iter().all(|x| x.abs() < 1e-12 * scale));
    }

    #[test]
    fn fisher_rao_is_symmetric(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let n = rng.random_range(2..=10);
        let pi = sample_interior(n, 1e-4, &mut rng);
        let u = tangent(n, &mut rng);
        let v = tangent(n, &mut rng);
        prop_assert_eq!(fisher_rao_inner(&pi, &u, &v).unwrap(), fisher_rao_inner(&pi, &v, &u).unwrap());
        prop_assert!(fisher_rao_inner(&pi, &u, &u).unwrap() >= 0.0);
    }

    #[test]
    fn drift_identity_and_sign_rule(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let n = rng.random_range(2..=10);
        let pi = sample_interior(n, 1e-4, &mut rng);
        let a = rng.random_range(0..n);
        let adv = rng.random_range(-3.0..3.0);
        let d = resp_entropy_drift(&pi, a, adv);
        prop_assert!((d - resp_entropy_drift_explicit(&pi, a, adv).unwrap()).abs() < 1e-12);
        let gap = -pi.probs()[a].ln() - pi.entropy();
        prop_assert_eq!(d.signum(), (adv * gap).signum());
    }

    #[test]
    fn expansion_term_is_nonnegative(seed in any::<u64>(), beta in 0.0f64..1.0, gamma in 0.0f64..0.1) {
        let mut rng = seeded_rng(seed);
        let n = rng.random_range(2..=10);
        let pi = sample_interior(n, 1e-4, &mut rng);
        let cfg = DriftConfig {
            advantage: rng.random_range(-2.0..2.0),
            beta,
            gamma,
            psi: Psi::Log1p,
            reference: Some(sample_interior(n, 1e-4, &mut rng)),
        };
        let d = regularized_drift(&pi, 0, &cfg).unwrap();
        prop_assert!(d.expansion_term >= 0.0);
        prop_assert!((d.total - (d.reward_term + d.expansion_term + d.alignment_term)).abs() < 1e-15);
    }
}
