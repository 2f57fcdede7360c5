//! Text analysis: lowercasing, splitting on non-alphanumeric characters and
//! optional stopword removal.
//!
//! The same analyzer feeds the BM25 index, the hashed test embedder and the
//! toy policy's feature hasher, so all of them agree on what a "token" is.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Analyzer options. The default lowercases and keeps every token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub lowercase: bool,
    /// Tokens to drop after lowercasing. `None` disables stopword removal.
    #[serde(default)]
    pub stopwords: Option<BTreeSet<String>>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            stopwords: None,
        }
    }
}

impl AnalysisConfig {
    /// Load a stopword list, one word per line. Blank lines and lines starting
    /// with `#` are ignored. Words are normalized with the same lowercasing
    /// rule as tokens.
    pub fn with_stopword_file(mut self, path: &Path) -> io::Result<Self> {
        let raw = fs::read_to_string(path)?;
        let words = raw
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|w| if self.lowercase { w.to_lowercase() } else { w.to_string() })
            .collect();
        self.stopwords = Some(words);
        Ok(self)
    }

    fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.as_ref().is_some_and(|s| s.contains(token))
    }
}

/// Ordered tokens of one text. Tokens are never empty and contain no
/// whitespace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenList(Vec<String>);

impl TokenList {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    /// Tokens joined by single spaces.
    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    pub fn into_vec(self) -> Vec<String> {
        self.0
    }
}

impl<'a> IntoIterator for &'a TokenList {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Byte spans `[start, end)` of the raw alphanumeric runs in `text`.
fn raw_spans(text: &str) -> impl Iterator<Item = (usize, usize)> + '_ {
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    std::iter::from_fn(move || loop {
        match chars.next() {
            Some((i, c)) if c.is_alphanumeric() => {
                if start.is_none() {
                    start = Some(i);
                }
            }
            Some((i, _)) => {
                if let Some(s) = start.take() {
                    return Some((s, i));
                }
            }
            None => return start.take().map(|s| (s, text.len())),
        }
    })
}

fn normalize(piece: &str, config: &AnalysisConfig) -> String {
    if config.lowercase {
        piece.to_lowercase()
    } else {
        piece.to_string()
    }
}

/// Tokenize `text`: split on every non-alphanumeric character, lowercase (if
/// configured) and drop stopwords (if configured).
pub fn tokenize(text: &str, config: &AnalysisConfig) -> TokenList {
    TokenList(
        raw_spans(text)
            .map(|(s, e)| normalize(&text[s..e], config))
            // Lowercasing can in principle produce non-alphanumeric output
            // (e.g. combining marks); re-split so the invariant holds.
            .flat_map(|t| {
                if t.chars().all(char::is_alphanumeric) {
                    vec![t]
                } else {
                    raw_spans(&t).map(|(s, e)| t[s..e].to_string()).collect()
                }
            })
            .filter(|t| !config.is_stopword(t))
            .collect(),
    )
}

/// Cut `text` right after its `max_tokens`-th token.
///
/// Returns the original slice and `false` when the text already has at most
/// `max_tokens` tokens. Stopwords count towards the limit since the cut is
/// about input length, not retrieval semantics.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> (&str, bool) {
    match raw_spans(text).nth(max_tokens) {
        None => (text, false),
        Some(_) => {
            let end = if max_tokens == 0 {
                0
            } else {
                raw_spans(text).nth(max_tokens - 1).map_or(0, |(_, e)| e)
            };
            (&text[..end], true)
        }
    }
}
