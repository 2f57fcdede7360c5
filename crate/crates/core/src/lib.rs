//! Query-rewrite retrieval toolkit.
//!
//! The crate covers the full loop for training and evaluating query rewriters
//! for reasoning-intensive retrieval:
//!
//! - [`corpus`]: documents, queries, graded judgments and `<query, positives>`
//!   training samples, with JSON-lines / TSV loaders.
//! - [`analysis`]: deterministic tokenization shared by every component.
//! - [`bm25`]: inverted index and BM25 ranked retrieval.
//! - [`relevance`]: embedding providers and cosine relevance.
//! - [`reward`]: the relevance-increment reward and the explicit-thinking
//!   format gate.
//! - [`grpo`]: group-relative policy optimization over a small tabular
//!   expansion policy.
//! - [`curation`]: building training sets from StackExchange-style QA dumps.
//! - [`evalkit`]: nDCG@k, TREC run files and run comparison.
//! - [`synthetic`]: a small generated task used for end-to-end checks.

pub mod analysis;
pub mod bm25;
pub mod corpus;
pub mod curation;
pub mod evalkit;
pub mod grpo;
mod hashing;
pub mod relevance;
pub mod reward;
pub mod synthetic;

pub use hashing::{fnv1a64, sha256_hex};
