mod common;

use aemlab::policy::{softmax, PolicyTable, StateId, Token, Vocabulary};
use aemlab::seeded_rng;
use common::random_policy;
use proptest::prelude::*;

/// Independent enumeration: explicit stack, probabilities from softmax of the
/// stored logits, surprisal as -ln of the path probability.
fn brute_force_entropy(policy: &PolicyTable, s: StateId) -> (f64, f64) {
    let v = policy.vocab();
    let mut h_resp = 0.0;
    let mut token_sum = 0.0;
    let mut stack: Vec<(Vec<Token>, f64, f64)> = vec![(Vec::new(), 1.0, 0.0)];
    while let Some((prefix, prob, hsum)) = stack.pop() {
        let p = softmax(&policy.logits(s, &prefix).unwrap());
        let h: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        for y in 0..v.size() {
            let mut next = prefix.clone();
            next.push(y as Token);
            let q = prob * p[y];
            if y as Token == v.terminator() || next.len() == policy.max_len() {
                h_resp += -q * q.ln();
                token_sum += q * (hsum + h);
            } else {
                stack.push((next, q, hsum + h));
            }
        }
    }
    (h_resp, token_sum)
}

#[test]
fn exact_entropy_matches_brute_force_oracle() {
    let mut rng = seeded_rng(11);
    let s = StateId(3);
    for _ in 0..20 {
        let policy = random_policy(&mut rng, 3, 2, &[s], 2.0);
        let (oracle, _) = brute_force_entropy(&policy, s);
        assert!((policy.exact_response_entropy(s).unwrap() - oracle).abs() < 1e-10);
    }
}

#[test]
fn deterministic_policy_has_zero_entropy() {
    let v = Vocabulary::new(3, 2).unwrap();
    let mut policy = PolicyTable::new(v, 2).unwrap();
    let s = StateId(1);
    policy.set_logits(s, &[], vec![-1e9, -1e9, 0.0]).unwrap();
    assert!(policy.exact_response_entropy(s).unwrap() < 1e-290);
    let mut rng = seeded_rng(0);
    assert_eq!(policy.mc_response_entropy(s, 50, &mut rng).unwrap(), 0.0);
    let r = policy.sample_response(s, &mut rng);
    assert_eq!((r.tokens, r.logprobs, r.entropies), (vec![2], vec![0.0], vec![0.0]));
}

#[test]
fn uniform_binary_token_frequencies_are_binomial() {
    let v = Vocabulary::new(2, 1).unwrap();
    let policy = PolicyTable::new(v, 3).unwrap();
    let mut rng = seeded_rng(5);
    let n = 10_000;
    let mut first_zero = 0usize;
    for _ in 0..n {
        let r = policy.sample_response(StateId(0), &mut rng);
        if r.tokens[0] == 0 {
            first_zero += 1;
        }
    }
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((first_zero as f64 - n as f64 * 0.5).abs() < 3.0 * sigma);
}

#[test]
fn monte_carlo_entropy_within_three_standard_errors() {
    let mut rng = seeded_rng(21);
    let s = StateId(9);
    let policy = random_policy(&mut rng, 3, 3, &[s], 1.5);
    let exact = policy.exact_response_entropy(s).unwrap();
    let k = 100_000;
    let samples: Vec<f64> = (0..k)
        .map(|_| policy.sample_response(s, &mut rng).recorded_surprisal())
        .collect();
    let mc = aemlab::stats::mean(&samples);
    let se = aemlab::stats::std_error(&samples);
    assert!((mc - exact).abs() < 3.0 * se, "mc {mc} exact {exact} se {se}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_entropy_nesting_is_exact(seed in any::<u64>(), vocab in 2usize..=4, max_len in 1usize..=4) {
        let mut rng = seeded_rng(seed);
        let s = StateId(seed);
        let policy = random_policy(&mut rng, vocab, max_len, &[s], 3.0);
        let h = policy.exact_response_entropy(s).unwrap();
        let t = policy.expected_token_entropy_sum(s).unwrap();
        prop_assert!((h - t).abs() < 1e-10);
        let (oh, ot) = brute_force_entropy(&policy, s);
        prop_assert!((h - oh).abs() < 1e-10);
        prop_assert!((t - ot).abs() < 1e-10);
    }

    #[test]
    fn conditionals_positive_and_normalized(logits in prop::collection::vec(-800.0f64..800.0, 2..8)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_responses_respect_contract(seed in any::<u64>(), vocab in 2usize..=5, max_len in 1usize..=4) {
        let mut rng = seeded_rng(seed);
        let s = StateId(1);
        let policy = random_policy(&mut rng, vocab, max_len, &[s], 4.0);
        let r = policy.sample_response(s, &mut seeded_rng(seed ^ 1));
        let again = policy.sample_response(s, &mut seeded_rng(seed ^ 1));
        prop_assert_eq!(&r, &again);
        prop_assert!(r.len() <= max_len && !r.is_empty());
        let term = policy.vocab().terminator();
        prop_assert!(r.len() == max_len || *r.tokens.last().unwrap() == term);
        prop_assert!(r.tokens[..r.len() - 1].iter().all(|&y| y != term));
        let ln_v = (vocab as f64).ln();
        prop_assert!(r.logprobs.iter().all(|&lp| lp <= 0.0));
        prop_assert!(r.entropies.iter().all(|&h| (0.0..=ln_v).contains(&h)));
        let s_rescored = policy.response_surprisal(s, &r.tokens).unwrap();
        prop_assert!(s_rescored >= 0.0);
        prop_assert!((s_rescored - r.recorded_surprisal()).abs() < 1e-12);
    }
}
