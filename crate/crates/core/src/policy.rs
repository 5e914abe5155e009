//! Autoregressive tabular softmax policy.
//!
//! Every `(state, token prefix)` node owns a logit vector over the
//! vocabulary. Nodes that were never written behave as all-zero logits, i.e.
//! the uniform distribution. A response is generated token by token until
//! the terminator is emitted or `max_len` tokens have been produced; a
//! truncated response is still a complete response.
//!
//! All entropies and surprisals are in nats.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Token = u16;

/// Upper bound on the number of enumerated response paths.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

const CHECKPOINT_FORMAT: &str = "aemlab-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    terminator: Token,
}

impl Vocabulary {
    pub fn new(size: usize, terminator: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::config(format!("vocabulary size {size} < 2")));
        }
        if size > Token::MAX as usize {
            return Err(Error::config(format!("vocabulary size {size} too large")));
        }
        if terminator as usize >= size {
            return Err(Error::config(format!(
                "terminator {terminator} outside vocabulary of size {size}"
            )));
        }
        Ok(Self { size, terminator })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn terminator(&self) -> Token {
        self.terminator
    }
}

/// Opaque identifier of an environment observation as seen by the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u64);

impl StateId {
    /// FNV-1a over a sequence of integers; stable across platforms and runs.
    pub fn from_parts(parts: &[i64]) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in parts {
            for b in p.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        StateId(h)
    }
}

/// Key of one conditional distribution: a state and the tokens emitted so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub state: StateId,
    pub prefix: Vec<Token>,
}

impl NodeKey {
    pub fn new(state: StateId, prefix: &[Token]) -> Self {
        Self {
            state,
            prefix: prefix.to_vec(),
        }
    }
}

/// A generated response together with the statistics recorded while sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<Token>,
    /// `log p(y_l | s, y_<l)` for every emitted token.
    pub logprobs: Vec<f64>,
    /// Shannon entropy of the conditional distribution at every position.
    pub entropies: Vec<f64>,
}

impl Response {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `-sum(logprobs)`, the surprisal recorded at sampling time.
    pub fn recorded_surprisal(&self) -> f64 {
        -self.logprobs.iter().sum::<f64>()
    }

    pub fn entropy_sum(&self) -> f64 {
        self.entropies.iter().sum()
    }
}

/// One complete response of the enumerated response tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePath {
    pub tokens: Vec<Token>,
    pub prob: f64,
    pub log_prob: f64,
    /// Sum of the conditional entropies along the path.
    pub entropy_sum: f64,
}

impl ResponsePath {
    pub fn surprisal(&self) -> f64 {
        -self.log_prob
    }
}

/// Probabilities, log-probabilities and entropy of one conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDistribution {
    pub probs: Vec<f64>,
    pub logprobs: Vec<f64>,
    pub entropy: f64,
}

/// Strictly positive softmax.
///
/// `exp` underflows to zero once a logit trails the maximum by more than
/// ~745; such entries are raised to the smallest positive normal double,
/// which is far below the 1e-9 normalization tolerance.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter()
        .map(|e| (e / total).max(f64::MIN_POSITIVE))
        .collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Entropy, probabilities and log-probabilities of a logit vector.
pub fn node_distribution(logits: &[f64]) -> NodeDistribution {
    let probs = softmax(logits);
    let logprobs = log_softmax(logits);
    // Entries raised to the positive floor carry no entropy mass.
    let raw: f64 = -logprobs
        .iter()
        .map(|lp| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * lp
            }
        })
        .sum::<f64>();
    let entropy = raw.clamp(0.0, (logits.len() as f64).ln());
    NodeDistribution {
        probs,
        logprobs,
        entropy,
    }
}

/// Number of complete responses in the tree for a given vocabulary and length cap.
pub fn response_count(vocab_size: usize, max_len: usize) -> u128 {
    let branch = (vocab_size - 1) as u128;
    let mut total: u128 = 0;
    let mut open: u128 = 1; // prefixes of the current length without terminator
    for len in 1..=max_len {
        if len == max_len {
            total = total.saturating_add(open.saturating_mul(vocab_size as u128));
        } else {
            total = total.saturating_add(open);
            open = open.saturating_mul(branch);
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    vocab: Vocabulary,
    max_len: usize,
    logits: BTreeMap<NodeKey, Vec<f64>>,
}

impl PolicyTable {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        Ok(Self {
            vocab,
            max_len,
            logits: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Explicitly stored nodes; every other node is at its zero default.
    pub fn entries(&self) -> impl Iterator<Item = (&NodeKey, &Vec<f64>)> {
        self.logits.iter()
    }

    fn check_prefix(&self, prefix: &[Token]) -> Result<()> {
        if prefix.len() >= self.max_len {
            return Err(Error::LengthViolation {
                len: prefix.len(),
                max_len: self.max_len,
            });
        }
        Ok(())
    }

    /// Logits of a node, zeros if it was never written.
    pub fn logits(&self, state: StateId, prefix: &[Token]) -> Result<Vec<f64>> {
        self.check_prefix(prefix)?;
        Ok(self
            .logits
            .get(&NodeKey::new(state, prefix))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.size]))
    }

    pub fn set_logits(&mut self, state: StateId, prefix: &[Token], logits: Vec<f64>) -> Result<()> {
        self.check_prefix(prefix)?;
        if logits.len() != self.vocab.size {
            return Err(Error::protocol(format!(
                "logit vector of length {} for vocabulary of size {}",
                logits.len(),
                self.vocab.size
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::protocol("non-finite logit"));
        }
        self.logits.insert(NodeKey::new(state, prefix), logits);
        Ok(())
    }

    /// Mutable logits of a node, materialising the zero default.
    pub fn logits_mut(&mut self, key: &NodeKey) -> Result<&mut Vec<f64>> {
        self.check_prefix(&key.prefix)?;
        let size = self.vocab.size;
        Ok(self
            .logits
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; size]))
    }

    pub fn node(&self, state: StateId, prefix: &[Token]) -> Result<NodeDistribution> {
        self.check_prefix(prefix)?;
        Ok(match self.logits.get(&NodeKey::new(state, prefix)) {
            Some(z) => node_distribution(z),
            None => node_distribution(&vec![0.0; self.vocab.size]),
        })
    }

    /// Next-token distribution at `(state, prefix)`.
    pub fn token_distribution(&self, state: StateId, prefix: &[Token]) -> Result<Vec<f64>> {
        Ok(self.node(state, prefix)?.probs)
    }

    fn is_complete(&self, tokens: &[Token]) -> bool {
        tokens.len() >= self.max_len || tokens.last() == Some(&self.vocab.terminator)
    }

    /// Samples a response, recording per-token log-probabilities and entropies.
    pub fn sample_response<R: Rng + ?Sized>(&self, state: StateId, rng: &mut R) -> Response {
        let mut tokens = Vec::with_capacity(self.max_len);
        let mut logprobs = Vec::with_capacity(self.max_len);
        let mut entropies = Vec::with_capacity(self.max_len);
        while !self.is_complete(&tokens) {
            let node = self
                .node(state, &tokens)
                .expect("prefix shorter than max_len");
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut choice = node.probs.len() - 1;
            for (y, p) in node.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    choice = y;
                    break;
                }
            }
            tokens.push(choice as Token);
            logprobs.push(node.logprobs[choice]);
            entropies.push(node.entropy);
        }
        Response {
            tokens,
            logprobs,
            entropies,
        }
    }

    /// Per-token `(logprob, entropy)` of a given token sequence.
    pub fn score_tokens(&self, state: StateId, tokens: &[Token]) -> Result<Vec<(f64, f64)>> {
        if tokens.len() > self.max_len {
            return Err(Error::LengthViolation {
                len: tokens.len(),
                max_len: self.max_len,
            });
        }
        let mut out = Vec::with_capacity(tokens.len());
        for (l, &y) in tokens.iter().enumerate() {
            if y as usize >= self.vocab.size {
                return Err(Error::protocol(format!("token {y} outside vocabulary")));
            }
            let node = self.node(state, &tokens[..l])?;
            out.push((node.logprobs[y as usize], node.entropy));
        }
        Ok(out)
    }

    /// `S(a|s) = -sum_l log p(y_l | s, y_<l)`.
    pub fn response_surprisal(&self, state: StateId, tokens: &[Token]) -> Result<f64> {
        Ok(-self
            .score_tokens(state, tokens)?
            .iter()
            .map(|(lp, _)| lp)
            .sum::<f64>())
    }

    pub fn response_log_prob(&self, state: StateId, tokens: &[Token]) -> Result<f64> {
        Ok(-self.response_surprisal(state, tokens)?)
    }

    pub fn enumeration_size(&self) -> u128 {
        response_count(self.vocab.size, self.max_len)
    }

    fn check_budget(&self) -> Result<()> {
        let required = self.enumeration_size();
        if required > ENUMERATION_BUDGET {
            return Err(Error::Budget {
                required,
                budget: ENUMERATION_BUDGET,
            });
        }
        Ok(())
    }

    /// All complete responses at `state` in depth-first token order.
    pub fn enumerate_responses(&self, state: StateId) -> Result<Vec<ResponsePath>> {
        self.check_budget()?;
        let mut out = Vec::with_capacity(self.enumeration_size() as usize);
        let mut prefix = Vec::with_capacity(self.max_len);
        self.walk(state, &mut prefix, 1.0, 0.0, 0.0, &mut out);
        Ok(out)
    }

    fn walk(
        &self,
        state: StateId,
        prefix: &mut Vec<Token>,
        prob: f64,
        log_prob: f64,
        entropy_sum: f64,
        out: &mut Vec<ResponsePath>,
    ) {
        let node = self.node(state, prefix).expect("prefix shorter than max_len");
        for y in 0..self.vocab.size {
            prefix.push(y as Token);
            let p = prob * node.probs[y];
            let lp = log_prob + node.logprobs[y];
            let hs = entropy_sum + node.entropy;
            if self.is_complete(prefix) {
                out.push(ResponsePath {
                    tokens: prefix.clone(),
                    prob: p,
                    log_prob: lp,
                    entropy_sum: hs,
                });
            } else {
                self.walk(state, prefix, p, lp, hs, out);
            }
            prefix.pop();
        }
    }

    /// `H_resp(s) = E_a[S(a|s)]` by exhaustive enumeration.
    pub fn exact_response_entropy(&self, state: StateId) -> Result<f64> {
        Ok(self
            .enumerate_responses(state)?
            .iter()
            .map(|a| a.prob * a.surprisal())
            .sum())
    }

    /// `E_a[sum_l H_l(a, s)]`, the pathwise token-entropy expectation.
    pub fn expected_token_entropy_sum(&self, state: StateId) -> Result<f64> {
        Ok(self
            .enumerate_responses(state)?
            .iter()
            .map(|a| a.prob * a.entropy_sum)
            .sum())
    }

    /// Monte-Carlo estimate `(1/K) sum_j S(a_j|s)` using sampled responses.
    pub fn mc_response_entropy<R: Rng + ?Sized>(
        &self,
        state: StateId,
        samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if samples == 0 {
            return Err(Error::config("Monte-Carlo sample count must be >= 1"));
        }
        let total: f64 = (0..samples)
            .map(|_| self.sample_response(state, rng).recorded_surprisal())
            .sum();
        Ok(total / samples as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            vocab_size: self.vocab.size,
            terminator: self.vocab.terminator,
            max_len: self.max_len,
            entries: self
                .logits
                .iter()
                .map(|(k, z)| CheckpointEntry {
                    state: k.state,
                    prefix: k.prefix.clone(),
                    logits: z.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let mut policy = PolicyTable::new(Vocabulary::new(ckpt.vocab_size, ckpt.terminator)?, ckpt.max_len)?;
        for e in ckpt.entries {
            policy.set_logits(e.state, &e.prefix, e.logits)?;
        }
        Ok(policy)
    }
}

/// Versioned on-disk form of a [`PolicyTable`]. Only written nodes are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub vocab_size: usize,
    pub terminator: Token,
    pub max_len: usize,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub state: StateId,
    pub prefix: Vec<Token>,
    pub logits: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn policy(size: usize, max_len: usize) -> PolicyTable {
        PolicyTable::new(Vocabulary::new(size, (size - 1) as Token).unwrap(), max_len).unwrap()
    }

    const S: StateId = StateId(42);

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(1, 0).is_err());
        assert!(Vocabulary::new(3, 3).is_err());
        assert!(Vocabulary::new(2, 1).is_ok());
    }

    #[test]
    fn zero_logits_are_uniform() {
        let p = policy(4, 3).token_distribution(S, &[]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn two_to_one_odds() {
        let mut pol = policy(2, 3);
        pol.set_logits(S, &[], vec![2f64.ln(), 0.0]).unwrap();
        let p = pol.token_distribution(S, &[]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_stay_positive() {
        let mut pol = policy(2, 3);
        pol.set_logits(S, &[], vec![0.0, -1e9]).unwrap();
        let p = pol.token_distribution(S, &[]).unwrap();
        assert!(p[1] > 0.0);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prefix_too_long_is_rejected() {
        let pol = policy(3, 2);
        assert!(matches!(
            pol.token_distribution(S, &[0, 0]),
            Err(Error::LengthViolation { len: 2, max_len: 2 })
        ));
    }

    fn terminator_only(size: usize, max_len: usize) -> PolicyTable {
        let mut pol = policy(size, max_len);
        let mut z = vec![-1e9; size];
        z[size - 1] = 0.0;
        pol.set_logits(S, &[], z).unwrap();
        pol
    }

    #[test]
    fn deterministic_terminator_response() {
        let pol = terminator_only(3, 4);
        let r = pol.sample_response(S, &mut seeded_rng(1));
        assert_eq!(r.tokens, vec![2]);
        assert!(r.logprobs[0].abs() < 1e-300);
        assert!(r.entropies[0].abs() < 1e-12);
        assert!(pol.response_surprisal(S, &r.tokens).unwrap().abs() < 1e-300);
        assert!(pol.exact_response_entropy(S).unwrap().abs() < 1e-12);
        assert!(pol.mc_response_entropy(S, 10, &mut seeded_rng(2)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let pol = policy(4, 5);
        let a = pol.sample_response(S, &mut seeded_rng(9));
        let b = pol.sample_response(S, &mut seeded_rng(9));
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_binary_surprisal() {
        let pol = policy(2, 3);
        let s = pol.response_surprisal(S, &[0, 0, 0]).unwrap();
        assert!((s - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_token_bernoulli_entropy() {
        let pol = policy(2, 1);
        let h = pol.exact_response_entropy(S).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn response_count_matches_enumeration() {
        for size in 2..5 {
            for max_len in 1..5 {
                let pol = policy(size, max_len);
                let n = pol.enumerate_responses(S).unwrap().len() as u128;
                assert_eq!(n, response_count(size, max_len), "size {size} len {max_len}");
            }
        }
    }

    #[test]
    fn enumeration_budget_guard() {
        let pol = policy(11, 7);
        assert!(matches!(pol.exact_response_entropy(S), Err(Error::Budget { .. })));
    }

    #[test]
    fn recorded_stats_match_rescoring() {
        let mut pol = policy(3, 4);
        pol.set_logits(S, &[], vec![0.3, -0.2, 0.1]).unwrap();
        pol.set_logits(S, &[1], vec![1.0, 0.0, -1.0]).unwrap();
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let r = pol.sample_response(S, &mut rng);
            let s = pol.response_surprisal(S, &r.tokens).unwrap();
            assert!((s - r.recorded_surprisal()).abs() < 1e-12);
            assert!(r.len() <= 4);
            assert!(r.len() == 4 || *r.tokens.last().unwrap() == 2);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut pol = policy(3, 2);
        pol.set_logits(S, &[0], vec![0.1, 0.2, -0.30000000000000004]).unwrap();
        pol.set_logits(StateId(7), &[], vec![1e-300, 5.0, 1.0 / 3.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        pol.save(&path).unwrap();
        assert_eq!(PolicyTable::load(&path).unwrap(), pol);
    }

    #[test]
    fn checkpoint_version_checked() {
        let mut ckpt = policy(3, 2).to_checkpoint();
        ckpt.version = 99;
        assert!(PolicyTable::from_checkpoint(ckpt).is_err());
    }
}
