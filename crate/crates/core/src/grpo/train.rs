use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::{sample_group, ToyExpansionPolicy};
use super::step::{grpo_step, GroupRollout};
use super::{GrpoConfig, GrpoError, Result};
use crate::corpus::TrainingSample;
use crate::hashing::stream_seed;
use crate::relevance::RelevanceProvider;
use crate::reward::{score_group, RewardConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub loss: f64,
    pub clip_frac: f64,
    pub ratio_clamps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trailing moving average of `mean_reward`; element `i` averages entries
    /// `max(0, i+1-window)..=i`.
    pub fn smoothed_reward(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let rewards: Vec<f64> = self.entries.iter().map(|e| e.mean_reward).collect();
        (0..rewards.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                rewards[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }
}

/// Indices of the samples used at iteration `iter` (1-based).
fn batch_indices(len: usize, batch_size: Option<usize>, iter: usize) -> Vec<usize> {
    match batch_size {
        None => (0..len).collect(),
        Some(b) => {
            let start = (iter - 1) * b;
            (start..start + b).map(|i| i % len).collect()
        }
    }
}

/// Run GRPO for `iterations` steps starting from `initial`.
///
/// The reference policy for the KL term is `initial`, frozen. Each sample's
/// rollout draws from its own RNG stream keyed by `(iteration, sample index)`,
/// so results do not depend on thread scheduling.
pub fn train<P: RelevanceProvider + ?Sized>(
    initial: &ToyExpansionPolicy,
    dataset: &[TrainingSample],
    provider: &P,
    config: &GrpoConfig,
    reward: &RewardConfig,
    iterations: usize,
) -> Result<(ToyExpansionPolicy, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(GrpoError::EmptyDataset);
    }
    let reference = initial;
    let mut policy = initial.clone();
    let mut log = TrainLog::default();

    for iter in 1..=iterations {
        let batch = batch_indices(dataset.len(), config.batch_size, iter);
        let rollouts = batch
            .par_iter()
            .map(|&idx| {
                let sample = &dataset[idx];
                let seed = stream_seed(config.seed, &[iter as u64, idx as u64]);
                let mut rollout = sample_group(&policy, &sample.query, config.group_size, seed);
                rollout.fill_reference(reference)?;
                let records = score_group(provider, sample, &rollout.rewrites, reward)?;
                let rewards = records.iter().map(|r| r.reward).collect();
                rollout.set_rewards(rewards, config.delta, config.group_weight);
                Ok(rollout)
            })
            .collect::<Result<Vec<GroupRollout>>>()?;

        let rewards: Vec<f64> = rollouts.iter().flat_map(|r| r.rewards.iter().copied()).collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;

        let mut entry = TrainLogEntry {
            iter,
            mean_reward,
            mean_kl: 0.0,
            loss: 0.0,
            clip_frac: 0.0,
            ratio_clamps: 0,
        };
        for _ in 0..config.epochs_per_batch {
            let (next, stats) = grpo_step(&policy, &rollouts, config)?;
            policy = next;
            entry.mean_kl += stats.mean_kl;
            entry.loss += stats.loss;
            entry.clip_frac += stats.clip_fraction;
            entry.ratio_clamps += stats.ratio_clamps;
        }
        let epochs = config.epochs_per_batch as f64;
        entry.mean_kl /= epochs;
        entry.loss /= epochs;
        entry.clip_frac /= epochs;
        log::debug!("iter {iter}: reward {:.5} kl {:.5}", entry.mean_reward, entry.mean_kl);
        log.entries.push(entry);
    }
    Ok((policy, log))
}
