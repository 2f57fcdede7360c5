use serde::Serialize;

use super::objective::{
    clipped_surrogate, importance_ratio, kl_penalty, normalize_advantages, ratio_exponent_clamped,
};
use super::policy::ToyExpansionPolicy;
use super::{GroupWeightMode, GrpoConfig, GrpoError, LossAggregation, Result};

/// `G` sampled rewrites of one query and everything the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub sample_id: String,
    pub query: String,
    pub rewrites: Vec<String>,
    pub actions: Vec<Vec<usize>>,
    /// Sequence log-probability under the sampling policy.
    pub logp_old: Vec<f64>,
    pub token_logp_old: Vec<Vec<f64>>,
    /// Sequence log-probability under the frozen reference policy.
    pub logp_ref: Vec<f64>,
    pub token_logp_ref: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupRollout {
    pub(crate) fn new(
        sample_id: String,
        query: String,
        rewrites: Vec<String>,
        actions: Vec<Vec<usize>>,
        token_logp_old: Vec<Vec<f64>>,
    ) -> Self {
        let logp_old: Vec<f64> = token_logp_old.iter().map(|t| t.iter().sum()).collect();
        Self {
            sample_id,
            query,
            rewrites,
            actions,
            logp_ref: logp_old.clone(),
            token_logp_ref: token_logp_old.clone(),
            logp_old,
            token_logp_old,
            rewards: Vec::new(),
            advantages: Vec::new(),
        }
    }

    pub fn group_size(&self) -> usize {
        self.actions.len()
    }

    /// Recompute reference log-probabilities under `reference`.
    pub fn fill_reference(&mut self, reference: &ToyExpansionPolicy) -> Result<()> {
        self.token_logp_ref = self
            .actions
            .iter()
            .map(|a| reference.token_logprobs(&self.query, a))
            .collect::<Result<_>>()?;
        self.logp_ref = self.token_logp_ref.iter().map(|t| t.iter().sum()).collect();
        Ok(())
    }

    /// Store rewards and their group-normalized advantages.
    pub fn set_rewards(&mut self, rewards: Vec<f64>, delta: f64, mode: GroupWeightMode) {
        self.advantages = normalize_advantages(&rewards, delta, mode);
        self.rewards = rewards;
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        let g = self.actions.len();
        let bad = |m: &str| {
            Err(GrpoError::MalformedRollout {
                sample_id: self.sample_id.clone(),
                message: m.to_string(),
            })
        };
        if g == 0 {
            return bad("empty group");
        }
        if self.advantages.len() != g {
            return bad("advantages not filled");
        }
        if self.token_logp_old.len() != g || self.token_logp_ref.len() != g {
            return bad("log-probabilities do not match the group size");
        }
        for ((a, old), r) in self.actions.iter().zip(&self.token_logp_old).zip(&self.token_logp_ref) {
            if a.len() != old.len() || a.len() != r.len() {
                return bad("per-token log-probabilities do not match the sequence length");
            }
            if let Some(&index) = a.iter().find(|&&x| x >= vocab) {
                return Err(GrpoError::ActionOutOfRange { index, vocab });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub loss: f64,
    /// Weighted surrogate objective (before negation).
    pub surrogate: f64,
    /// Mean KL estimate over all tokens.
    pub mean_kl: f64,
    /// Fraction of tokens with `|ratio - 1| > epsilon`.
    pub clip_fraction: f64,
    pub ratio_clamps: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub ratio_clamps: usize,
    pub mean_reward: f64,
}

/// Per-token loss and, when `grad` is given, its gradient w.r.t. the logits.
///
/// ```text
/// loss = sum_tokens w_t * ( -min(r_t A, clip(r_t) A) + beta * k3_t )
/// ```
///
/// with `w_t = 1 / tokens_in_group` (group-sum) or `1 / tokens_in_batch`
/// (token-mean). The sequence advantage is broadcast to each of its tokens.
fn evaluate(
    policy: &ToyExpansionPolicy,
    rollouts: &[GroupRollout],
    config: &GrpoConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    if rollouts.is_empty() {
        return Err(GrpoError::EmptyRollouts);
    }
    let vocab = policy.vocab_size();
    for r in rollouts {
        r.validate(vocab)?;
    }
    let total_tokens: usize = rollouts.iter().flat_map(|r| &r.actions).map(Vec::len).sum();
    if total_tokens == 0 {
        return Err(GrpoError::EmptyRollouts);
    }
    let eps = config.clip_epsilon;
    let beta = config.kl_beta;

    let mut out = LossBreakdown {
        tokens: total_tokens,
        ..Default::default()
    };
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;

    for rollout in rollouts {
        let group_tokens: usize = rollout.actions.iter().map(Vec::len).sum();
        let weight = match config.loss_aggregation {
            LossAggregation::GroupSum => 1.0 / group_tokens as f64,
            LossAggregation::TokenMean => 1.0 / total_tokens as f64,
        };
        let bucket = policy.bucket(&rollout.query);
        let log_probs = policy.log_probs(bucket);

        for (i, seq) in rollout.actions.iter().enumerate() {
            let adv = rollout.advantages[i];
            for (t, &a) in seq.iter().enumerate() {
                let lp = log_probs[a];
                let lp_old = rollout.token_logp_old[i][t];
                let lp_ref = rollout.token_logp_ref[i][t];

                let ratio = importance_ratio(lp, lp_old);
                let clamped = ratio_exponent_clamped(lp, lp_old);
                let surrogate = clipped_surrogate(ratio, adv, eps);
                let kl = kl_penalty(lp, lp_ref);

                out.ratio_clamps += usize::from(clamped);
                clipped += usize::from((ratio - 1.0).abs() > eps);
                kl_sum += kl;
                out.surrogate += weight * surrogate;
                out.loss += weight * (-surrogate + beta * kl);

                if let Some(grad) = grad.as_deref_mut() {
                    // d surrogate / d lp: the unclipped branch is active when it
                    // is the minimum (ties included); the clipped branch is flat
                    // outside the band.
                    let unclipped_active = ratio * adv <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
                    let in_band = (1.0 - eps..=1.0 + eps).contains(&ratio);
                    let dsurr = if clamped || !(unclipped_active || in_band) {
                        0.0
                    } else {
                        ratio * adv
                    };
                    let dkl = 1.0 - (lp_ref - lp).exp();
                    let dlp = weight * (-dsurr + beta * dkl);
                    if dlp != 0.0 {
                        let row = &mut grad[bucket * vocab..(bucket + 1) * vocab];
                        for (j, g) in row.iter_mut().enumerate() {
                            let indicator = if j == a { 1.0 } else { 0.0 };
                            *g += dlp * (indicator - log_probs[j].exp());
                        }
                    }
                }
            }
        }
    }
    out.mean_kl = kl_sum / total_tokens as f64;
    out.clip_fraction = clipped as f64 / total_tokens as f64;
    Ok(out)
}

pub fn grpo_loss(
    policy: &ToyExpansionPolicy,
    rollouts: &[GroupRollout],
    config: &GrpoConfig,
) -> Result<LossBreakdown> {
    evaluate(policy, rollouts, config, None)
}

/// Loss and its analytic gradient w.r.t. the logits (row-major, same layout
/// as [`ToyExpansionPolicy::logits`]).
pub fn grpo_gradient(
    policy: &ToyExpansionPolicy,
    rollouts: &[GroupRollout],
    config: &GrpoConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; policy.logits().len()];
    let loss = evaluate(policy, rollouts, config, Some(&mut grad))?;
    Ok((loss, grad))
}

/// One gradient-descent update on the logits.
pub fn grpo_step(
    policy: &ToyExpansionPolicy,
    rollouts: &[GroupRollout],
    config: &GrpoConfig,
) -> Result<(ToyExpansionPolicy, StepStats)> {
    let (loss, grad) = grpo_gradient(policy, rollouts, config)?;
    let mut next = policy.clone();
    for (z, g) in next.logits_mut().iter_mut().zip(&grad) {
        *z -= config.learning_rate * g;
    }
    let (reward_sum, reward_n) = rollouts
        .iter()
        .flat_map(|r| &r.rewards)
        .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
    Ok((
        next,
        StepStats {
            loss: loss.loss,
            mean_kl: loss.mean_kl,
            clip_fraction: loss.clip_fraction,
            ratio_clamps: loss.ratio_clamps,
            mean_reward: if reward_n == 0 { 0.0 } else { reward_sum / reward_n as f64 },
        },
    ))
}
