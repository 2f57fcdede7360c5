use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::step::GroupRollout;
use super::{GrpoError, Result};
use crate::analysis::{tokenize, AnalysisConfig};
use crate::corpus::Query;
use crate::evalkit::{EvalError, Rewriter};
use crate::hashing::fnv1a64;

/// Tabular expansion policy.
///
/// A query is hashed (over its analyzed tokens) into one of `buckets` rows;
/// each row holds logits over `vocab`. A rewrite appends
/// `expansion_length` terms drawn i.i.d. from the row's softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExpansionPolicy {
    vocab: Vec<String>,
    buckets: usize,
    expansion_length: usize,
    /// Row-major `[buckets x vocab]`.
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    vocab: Vec<String>,
    expansion_length: usize,
    logits: Vec<Vec<f64>>,
}

impl ToyExpansionPolicy {
    /// Policy with all-zero logits (uniform over the vocabulary).
    pub fn new(vocab: Vec<String>, buckets: usize, expansion_length: usize) -> Result<Self> {
        let logits = vec![0.0; buckets * vocab.len()];
        Self::from_logits(vocab, buckets, expansion_length, logits)
    }

    pub fn from_logits(
        vocab: Vec<String>,
        buckets: usize,
        expansion_length: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let fail = |m: String| Err(GrpoError::Config(m));
        if vocab.len() < 2 {
            return fail(format!("vocabulary needs at least 2 terms, got {}", vocab.len()));
        }
        if buckets == 0 {
            return fail("policy needs at least one feature bucket".into());
        }
        if expansion_length == 0 {
            return fail("expansion_length must be at least 1".into());
        }
        if logits.len() != buckets * vocab.len() {
            return fail(format!(
                "expected {} logits, got {}",
                buckets * vocab.len(),
                logits.len()
            ));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return fail("logits must be finite".into());
        }
        Ok(Self {
            vocab,
            buckets,
            expansion_length,
            logits,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn expansion_length(&self) -> usize {
        self.expansion_length
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        let v = self.vocab.len();
        &self.logits[bucket * v..(bucket + 1) * v]
    }

    /// Feature bucket of a query.
    pub fn bucket(&self, query: &str) -> usize {
        let key = tokenize(query, &AnalysisConfig::default()).joined();
        (fnv1a64(&key) % self.buckets as u64) as usize
    }

    /// Log-softmax of one row.
    pub fn log_probs(&self, bucket: usize) -> Vec<f64> {
        let row = self.row(bucket);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.iter().map(|z| z - lse).collect()
    }

    fn check_actions(&self, actions: &[usize]) -> Result<()> {
        match actions.iter().find(|&&a| a >= self.vocab.len()) {
            Some(&index) => Err(GrpoError::ActionOutOfRange {
                index,
                vocab: self.vocab.len(),
            }),
            None => Ok(()),
        }
    }

    /// Per-draw log-probabilities of `actions` for `query`.
    pub fn token_logprobs(&self, query: &str, actions: &[usize]) -> Result<Vec<f64>> {
        self.check_actions(actions)?;
        let lp = self.log_probs(self.bucket(query));
        Ok(actions.iter().map(|&a| lp[a]).collect())
    }

    /// `query` followed by the chosen terms, space separated.
    pub fn rewrite_text(&self, query: &str, actions: &[usize]) -> String {
        let mut out = query.to_string();
        for &a in actions {
            out.push(' ');
            out.push_str(&self.vocab[a]);
        }
        out
    }

    /// The `expansion_length` most likely distinct terms, best first; ties go
    /// to the lower vocabulary index.
    ///
    /// Repeating the argmax would append one term `L` times, so greedy
    /// decoding for this policy is top-L without replacement.
    pub fn greedy_actions(&self, query: &str) -> Vec<usize> {
        let row = self.row(self.bucket(query));
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(self.expansion_length.min(row.len()));
        order
    }

    pub fn greedy_rewrite(&self, query: &str) -> String {
        self.rewrite_text(query, &self.greedy_actions(query))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            vocab: self.vocab.clone(),
            expansion_length: self.expansion_length,
            logits: self.logits.chunks(self.vocab.len()).map(<[f64]>::to_vec).collect(),
        };
        let json = serde_json::to_string(&ck).expect("checkpoint serializes");
        fs::write(path, json + "\n").map_err(|e| GrpoError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| GrpoError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let raw = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&raw).map_err(|e| err(e.to_string()))?;
        let buckets = ck.logits.len();
        if ck.logits.iter().any(|r| r.len() != ck.vocab.len()) {
            return Err(err("logit rows must match the vocabulary size".into()));
        }
        Self::from_logits(ck.vocab, buckets, ck.expansion_length, ck.logits.concat())
    }
}

/// `sum_t log softmax(row(query))[a_t]`.
pub fn policy_logprob(policy: &ToyExpansionPolicy, query: &str, actions: &[usize]) -> Result<f64> {
    Ok(policy.token_logprobs(query, actions)?.iter().sum())
}

/// Draw `group_size` rewrites of `query`. Deterministic in `seed`.
///
/// The returned rollout has empty rewards and advantages, and its reference
/// log-probabilities equal the sampling ones until
/// [`GroupRollout::fill_reference`] is called.
pub fn sample_group(
    policy: &ToyExpansionPolicy,
    query: &Query,
    group_size: usize,
    seed: u64,
) -> GroupRollout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lp = policy.log_probs(policy.bucket(&query.text));
    let dist = WeightedIndex::new(lp.iter().map(|l| l.exp())).expect("softmax weights are valid");

    let mut actions = Vec::with_capacity(group_size);
    let mut rewrites = Vec::with_capacity(group_size);
    let mut token_logp = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let seq: Vec<usize> = (0..policy.expansion_length).map(|_| dist.sample(&mut rng)).collect();
        rewrites.push(policy.rewrite_text(&query.text, &seq));
        token_logp.push(seq.iter().map(|&a| lp[a]).collect::<Vec<f64>>());
        actions.push(seq);
    }
    GroupRollout::new(query.id.clone(), query.text.clone(), rewrites, actions, token_logp)
}

/// Rewrites queries with a policy's greedy decoding.
pub struct PolicyRewriter<'a>(pub &'a ToyExpansionPolicy);

impl Rewriter for PolicyRewriter<'_> {
    fn rewrite(&self, query: &Query) -> std::result::Result<String, EvalError> {
        Ok(self.0.greedy_rewrite(&query.text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn logprob_examples() {
        let p = ToyExpansionPolicy::new(vocab(2), 1, 1).unwrap();
        assert!((policy_logprob(&p, "q", &[0]).unwrap() - 0.5f64.ln()).abs() < 1e-15);

        let p = ToyExpansionPolicy::from_logits(vocab(2), 1, 1, vec![3f64.ln(), 0.0]).unwrap();
        let expected = (0.75f64).ln();
        assert!((policy_logprob(&p, "q", &[0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected + 0.287682).abs() < 1e-6);

        let p = ToyExpansionPolicy::new(vocab(4), 1, 2).unwrap();
        assert!((policy_logprob(&p, "q", &[3, 3]).unwrap() - 2.0 * 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_action() {
        let p = ToyExpansionPolicy::new(vocab(2), 1, 1).unwrap();
        assert!(matches!(
            policy_logprob(&p, "q", &[2]),
            Err(GrpoError::ActionOutOfRange { index: 2, vocab: 2 })
        ));
    }

    #[test]
    fn constructor_validation() {
        assert!(ToyExpansionPolicy::new(vocab(1), 1, 1).is_err());
        assert!(ToyExpansionPolicy::new(vocab(2), 0, 1).is_err());
        assert!(ToyExpansionPolicy::new(vocab(2), 1, 0).is_err());
        assert!(ToyExpansionPolicy::from_logits(vocab(2), 1, 1, vec![0.0]).is_err());
        assert!(ToyExpansionPolicy::from_logits(vocab(2), 1, 1, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = ToyExpansionPolicy::new(vocab(8), 4, 3).unwrap();
        let q = Query::new("q1", "owls at night");
        assert_eq!(sample_group(&p, &q, 16, 42), sample_group(&p, &q, 16, 42));
        assert_ne!(sample_group(&p, &q, 16, 42).actions, sample_group(&p, &q, 16, 43).actions);
    }

    #[test]
    fn degenerate_policy_always_picks_dominant_term() {
        let mut logits = vec![0.0; 4];
        logits[2] = 50.0;
        let p = ToyExpansionPolicy::from_logits(vocab(4), 1, 2, logits).unwrap();
        let r = sample_group(&p, &Query::new("q", "owls"), 16, 7);
        assert!(r.actions.iter().flatten().all(|&a| a == 2));
        assert!(r.rewrites.iter().all(|t| t == "owls t2 t2"));
    }

    #[test]
    fn uniform_pair_group() {
        let p = ToyExpansionPolicy::new(vocab(2), 1, 3).unwrap();
        let r = sample_group(&p, &Query::new("q", "x"), 2, 1);
        assert_eq!(r.actions.len(), 2);
        for (seq, lp) in r.actions.iter().zip(&r.logp_old) {
            assert!(seq.iter().all(|&a| a < 2));
            assert!((lp - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_takes_distinct_top_terms() {
        let p = ToyExpansionPolicy::from_logits(vocab(5), 1, 3, vec![0.1, 2.0, 0.5, 2.0, -1.0]).unwrap();
        assert_eq!(p.greedy_actions("q"), [1, 3, 2]);
        assert_eq!(p.greedy_rewrite("q"), "q t1 t3 t2");
    }

    #[test]
    fn bucket_ignores_case_and_punctuation() {
        let p = ToyExpansionPolicy::new(vocab(2), 1024, 1).unwrap();
        assert_eq!(p.bucket("Owls, at night!"), p.bucket("owls at night"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let logits: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 2.0).collect();
        let p = ToyExpansionPolicy::from_logits(vocab(4), 3, 2, logits).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        p.save(&path).unwrap();
        assert_eq!(ToyExpansionPolicy::load(&path).unwrap(), p);
    }
}
