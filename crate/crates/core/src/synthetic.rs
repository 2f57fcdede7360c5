//! Seeded query-expansion task for exercising the training loop end to end.
//!
//! Sample `i` has query `"topic{i} aspect{i} issue{i}"` and one positive
//! document made of `gold_per_doc` distinct vocabulary terms. Queries and
//! documents share no tokens, so the original queries retrieve nothing and a
//! policy only earns reward by appending gold terms.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, DocumentCollection, QrelSet, Query, QuerySet, TrainingSample};
use crate::grpo::ToyExpansionPolicy;

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub vocab: Vec<String>,
    /// Gold vocabulary indices per sample, ascending.
    pub gold: Vec<Vec<usize>>,
    pub samples: Vec<TrainingSample>,
    pub documents: DocumentCollection,
    pub queries: QuerySet,
    pub qrels: QrelSet,
}

impl SyntheticTask {
    /// # Panics
    /// If `gold_per_doc > vocab_size` or there are fewer distinct gold sets
    /// than samples.
    pub fn generate(samples: usize, vocab_size: usize, gold_per_doc: usize, seed: u64) -> Self {
        assert!(gold_per_doc >= 1 && gold_per_doc <= vocab_size);
        let vocab: Vec<String> = (0..vocab_size).map(|j| format!("term{j:02}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut seen = BTreeSet::new();
        let mut gold = Vec::with_capacity(samples);
        let mut attempts = 0;
        while gold.len() < samples {
            attempts += 1;
            assert!(attempts < 100 * samples + 1000, "not enough distinct gold sets");
            let mut g = sample(&mut rng, vocab_size, gold_per_doc).into_vec();
            g.sort_unstable();
            if seen.insert(g.clone()) {
                gold.push(g);
            }
        }

        let mut task = Self {
            vocab,
            gold,
            samples: Vec::with_capacity(samples),
            documents: DocumentCollection::new(),
            queries: QuerySet::new(),
            qrels: QrelSet::new(),
        };
        for i in 0..samples {
            let query = Query::new(format!("q{i}"), format!("topic{i} aspect{i} issue{i}"));
            let text = task.gold[i].iter().map(|&j| task.vocab[j].as_str()).collect::<Vec<_>>().join(" ");
            let doc = Document::new(format!("d{i}"), text);
            task.qrels.insert(&query.id, &doc.id, 1).expect("fresh pair");
            task.documents.push(doc.clone()).expect("unique id");
            task.queries.push(query.clone()).expect("unique id");
            task.samples
                .push(TrainingSample::new(query, vec![doc], None).expect("one positive"));
        }
        task
    }

    /// The acceptance-scale task: 30 samples, 32 terms, 3 gold terms each.
    pub fn standard(seed: u64) -> Self {
        Self::generate(30, 32, 3, seed)
    }

    /// Uniform policy over this task's vocabulary that appends as many terms
    /// as each document has gold terms.
    pub fn initial_policy(&self, buckets: usize) -> ToyExpansionPolicy {
        let length = self.gold.first().map_or(1, Vec::len);
        ToyExpansionPolicy::new(self.vocab.clone(), buckets, length).expect("valid task vocabulary")
    }

    /// Number of distinct gold terms among the policy's greedy expansion of
    /// each query.
    pub fn greedy_gold_hits(&self, policy: &ToyExpansionPolicy) -> Vec<usize> {
        self.samples
            .iter()
            .zip(&self.gold)
            .map(|(s, g)| {
                let picked: BTreeSet<&str> = policy
                    .greedy_actions(&s.query.text)
                    .into_iter()
                    .map(|a| policy.vocab()[a].as_str())
                    .collect();
                g.iter().filter(|&&j| picked.contains(self.vocab[j].as_str())).count()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{tokenize, AnalysisConfig};

    #[test]
    fn deterministic_and_disjoint() {
        let a = SyntheticTask::standard(7);
        let b = SyntheticTask::standard(7);
        assert_eq!(a.gold, b.gold);
        assert_eq!(a.samples.len(), 30);
        let cfg = AnalysisConfig::default();
        for s in &a.samples {
            let q: BTreeSet<String> = tokenize(&s.query.text, &cfg).into_vec().into_iter().collect();
            let d: BTreeSet<String> = tokenize(&s.positives[0].text, &cfg).into_vec().into_iter().collect();
            assert!(q.is_disjoint(&d));
            assert_eq!(d.len(), 3);
        }
        assert_ne!(SyntheticTask::standard(8).gold, a.gold);
    }

    #[test]
    fn gold_hits_of_a_perfect_policy() {
        let task = SyntheticTask::generate(4, 8, 2, 1);
        let mut policy = task.initial_policy(1024);
        let v = policy.vocab_size();
        for s in 0..4 {
            let b = policy.bucket(&task.samples[s].query.text);
            for &j in &task.gold[s] {
                policy.logits_mut()[b * v + j] = 5.0;
            }
        }
        // Buckets may collide for a handful of queries; at 1024 buckets and 4
        // queries they do not.
        assert_eq!(task.greedy_gold_hits(&policy), [2, 2, 2, 2]);
    }
}
