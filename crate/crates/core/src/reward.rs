//! Relevance-increment reward for rewritten queries.
//!
//! For a sample `<q, D+>` and a rewrite `q'`:
//!
//! ```text
//! score(x)  = sum_{d in D+} cos(embed(x), embed(d))
//! R(q, q')  = (score(q') - score(q)) / |D+|
//! ```
//!
//! In explicit-thinking mode the raw model output must look like
//! `<think>..</think><answer>..</answer>`; anything else scores exactly -1
//! and the relevance model is never consulted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::truncate_tokens;
use crate::corpus::{Document, TrainingSample};
use crate::relevance::{cosine, EmbeddingVector, RelevanceProvider, Result};

/// Reward assigned to outputs that fail the format check.
pub const FORMAT_PENALTY: f64 = -1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatMode {
    #[default]
    Plain,
    ExplicitThinking,
}

/// Which part of an explicit-thinking output becomes the rewritten query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerContent {
    #[default]
    Answer,
    ThinkingAndAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardConfig {
    pub mode: FormatMode,
    pub content: AnswerContent,
    /// Rewrites are cut to this many tokens before embedding.
    pub max_completion_tokens: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: FormatMode::Plain,
            content: AnswerContent::Answer,
            max_completion_tokens: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateOutcome {
    Pass(String),
    Fail,
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Check the output format and extract the text to score.
///
/// Explicit-thinking outputs pass only when each of the four tags occurs
/// exactly once, in the order think, /think, answer, /answer, with nothing
/// but whitespace before `<think>`, between `</think>` and `<answer>`, and
/// after `</answer>`.
pub fn format_gate(output: &str, mode: FormatMode, content: AnswerContent) -> GateOutcome {
    if mode == FormatMode::Plain {
        return GateOutcome::Pass(output.to_string());
    }
    let tags = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
    if tags.iter().any(|t| output.matches(t).count() != 1) {
        return GateOutcome::Fail;
    }
    let s = output.trim();
    let Some(rest) = s.strip_prefix(THINK_OPEN) else {
        return GateOutcome::Fail;
    };
    let Some((think, rest)) = rest.split_once(THINK_CLOSE) else {
        return GateOutcome::Fail;
    };
    let Some(rest) = rest.trim_start().strip_prefix(ANSWER_OPEN) else {
        return GateOutcome::Fail;
    };
    let Some(answer) = rest.strip_suffix(ANSWER_CLOSE) else {
        return GateOutcome::Fail;
    };
    match content {
        AnswerContent::Answer => GateOutcome::Pass(answer.to_string()),
        AnswerContent::ThinkingAndAnswer => GateOutcome::Pass(format!("{think}\n{answer}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub sample_id: String,
    pub rewrite_text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score_q_prime: Option<f64>,
    pub reward: f64,
    pub format_failed: bool,
    #[serde(default)]
    pub truncated: bool,
}

fn score_with(q: &EmbeddingVector, positives: &[EmbeddingVector]) -> Result<f64> {
    positives.iter().map(|d| cosine(q, d)).sum()
}

fn embed_positives<P: RelevanceProvider + ?Sized>(
    provider: &P,
    positives: &[Document],
) -> Result<Vec<EmbeddingVector>> {
    let texts: Vec<&str> = positives.iter().map(|d| d.text.as_str()).collect();
    provider.embed_batch(&texts)
}

/// `sum_i cos(q, d_i)` over the positives.
pub fn query_score<P: RelevanceProvider + ?Sized>(
    provider: &P,
    q: &str,
    positives: &[Document],
) -> Result<f64> {
    assert!(!positives.is_empty(), "query_score needs at least one positive");
    score_with(&provider.embed(q)?, &embed_positives(provider, positives)?)
}

/// `(score(q') - score(q)) / |D+|`.
pub fn semi_rule_reward<P: RelevanceProvider + ?Sized>(
    provider: &P,
    q: &str,
    q_prime: &str,
    positives: &[Document],
) -> Result<f64> {
    assert!(!positives.is_empty(), "reward needs at least one positive");
    let docs = embed_positives(provider, positives)?;
    let base = score_with(&provider.embed(q)?, &docs)?;
    let rewritten = score_with(&provider.embed(q_prime)?, &docs)?;
    Ok((rewritten - base) / positives.len() as f64)
}

/// Score every rewrite of one sample. Output order follows `rewrites`.
///
/// Query and positive embeddings are computed once per group, and only if at
/// least one rewrite passes the format gate.
pub fn score_group<P: RelevanceProvider + ?Sized>(
    provider: &P,
    sample: &TrainingSample,
    rewrites: &[String],
    config: &RewardConfig,
) -> Result<Vec<RewardRecord>> {
    assert!(!rewrites.is_empty(), "score_group needs at least one rewrite");

    let extracted: Vec<Option<String>> = rewrites
        .iter()
        .map(|r| match format_gate(r, config.mode, config.content) {
            GateOutcome::Pass(text) => Some(text),
            GateOutcome::Fail => None,
        })
        .collect();

    let context = if extracted.iter().any(Option::is_some) {
        let docs = embed_positives(provider, &sample.positives)?;
        let base = score_with(&provider.embed(&sample.query.text)?, &docs)?;
        Some((docs, base))
    } else {
        None
    };
    let n = sample.positives.len() as f64;

    extracted
        .par_iter()
        .zip(rewrites.par_iter())
        .map(|(text, raw)| {
            let record = |reward, score_q, score_q_prime, failed, truncated| RewardRecord {
                sample_id: sample.id().to_string(),
                rewrite_text: raw.clone(),
                score_q,
                score_q_prime,
                reward,
                format_failed: failed,
                truncated,
            };
            match (text, &context) {
                (Some(text), Some((docs, base))) => {
                    let (cut, truncated) = truncate_tokens(text, config.max_completion_tokens);
                    let rewritten = score_with(&provider.embed(cut)?, docs)?;
                    Ok(record((rewritten - base) / n, Some(*base), Some(rewritten), false, truncated))
                }
                _ => Ok(record(FORMAT_PENALTY, None, None, true, false)),
            }
        })
        .collect()
}

/// Score a single raw output against a sample.
pub fn score_output<P: RelevanceProvider + ?Sized>(
    provider: &P,
    sample: &TrainingSample,
    output: &str,
    config: &RewardConfig,
) -> Result<RewardRecord> {
    Ok(score_group(provider, sample, &[output.to_string()], config)?.remove(0))
}
