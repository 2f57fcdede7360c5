//! Group relative policy optimization for query rewriting.
//!
//! The trainer samples `G` rewrites per query from the policy, scores them
//! with the relevance-increment reward, normalizes rewards within each group
//!
//! ```text
//! A_i = w_g * (R_i - mean(R)) / (std(R) + delta)
//! ```
//!
//! and maximizes the clipped surrogate `min(r * A, clip(r, 1-eps, 1+eps) * A)`
//! minus a `beta`-weighted KL estimate against the frozen initial policy.
//!
//! The shipped policy is [`ToyExpansionPolicy`]: a per-feature-bucket softmax
//! over a fixed vocabulary of expansion terms. Its log-likelihood factorizes
//! per appended term, so ratios and KL are computed per token exactly as for
//! an autoregressive language model.

mod objective;
mod policy;
mod step;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use objective::{
    clipped_surrogate, group_mean_std, importance_ratio, kl_penalty, normalize_advantages,
    ratio_exponent_clamped, RATIO_EXPONENT_LIMIT,
};
pub use policy::{policy_logprob, sample_group, PolicyRewriter, ToyExpansionPolicy};
pub use step::{grpo_gradient, grpo_loss, grpo_step, GroupRollout, LossBreakdown, StepStats};
pub use train::{train, TrainLog, TrainLogEntry};

use crate::relevance::RelevanceError;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no rollouts to optimize")]
    EmptyRollouts,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("action index {index} out of range for vocabulary of {vocab}")]
    ActionOutOfRange { index: usize, vocab: usize },
    #[error("malformed rollout for {sample_id}: {message}")]
    MalformedRollout { sample_id: String, message: String },
    #[error(transparent)]
    Reward(#[from] RelevanceError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, GrpoError>;

/// Optional per-group rescaling of advantages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupWeightMode {
    /// `w_g = 1`.
    #[default]
    Uniform,
    /// `w_g = std / (std + delta)`: groups whose rewards barely differ get
    /// proportionally smaller advantages.
    VarianceScaled,
}

/// How per-token loss terms are averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossAggregation {
    /// Mean over the tokens of each group, summed over groups.
    #[default]
    GroupSum,
    /// Mean over every token of every sequence in the batch.
    TokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub delta: f64,
    pub learning_rate: f64,
    pub group_weight: GroupWeightMode,
    pub loss_aggregation: LossAggregation,
    /// Gradient steps per batch of rollouts. Values above 1 exercise the
    /// clipping path since the ratio moves away from 1 after the first step.
    pub epochs_per_batch: usize,
    /// Samples per iteration, cycling through the training set. `None` uses
    /// the whole set every iteration.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            clip_epsilon: 0.2,
            kl_beta: 0.008,
            delta: 1e-4,
            learning_rate: 0.1,
            group_weight: GroupWeightMode::Uniform,
            loss_aggregation: LossAggregation::GroupSum,
            epochs_per_batch: 1,
            batch_size: None,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    /// Settings for billion-parameter language-model policies; only the
    /// learning rate differs from the toy default.
    pub fn llm_scale() -> Self {
        Self {
            learning_rate: 1e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail("kl_beta must be a finite value >= 0");
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return fail("delta must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a finite value > 0");
        }
        if self.epochs_per_batch == 0 {
            return fail("epochs_per_batch must be at least 1");
        }
        if self.batch_size == Some(0) {
            return fail("batch_size must be at least 1");
        }
        Ok(())
    }
}
