//! Inverted index and BM25 ranking.
//!
//! Scoring follows the Robertson / Spärck Jones form with the smoothed idf
//! `ln(1 + (N - df + 0.5) / (df + 0.5))`, which is strictly positive for every
//! `df <= N`. A query term repeated `m` times contributes `m` times.
//!
//! Snapshot layout (`index.json`, one JSON object):
//!
//! ```text
//! {
//!   "format": "qrt-bm25-index",
//!   "version": 1,
//!   "analysis": {"lowercase": true, "stopwords": null | [..]},
//!   "doc_ids": ["d1", ...],            // ordinal -> external id
//!   "doc_lengths": [3, ...],           // ordinal -> token count
//!   "postings": [["term", [[ordinal, tf], ...]], ...]   // sorted by term
//! }
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{tokenize, AnalysisConfig, TokenList};
use crate::corpus::{DocumentCollection, Query};

pub const SNAPSHOT_FORMAT: &str = "qrt-bm25-index";
pub const SNAPSHOT_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum Bm25Error {
    #[error("document ordinal {ordinal} out of range (index has {doc_count} documents)")]
    OrdinalOutOfRange { ordinal: usize, doc_count: usize },
    #[error("index snapshot {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("index snapshot {path}: {message}")]
    Snapshot { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    doc_ids: Vec<String>,
    ordinals: HashMap<String, u32>,
    analysis: AnalysisConfig,
}

impl InvertedIndex {
    pub fn build(docs: &DocumentCollection, analysis: &AnalysisConfig) -> Self {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut doc_ids = Vec::with_capacity(docs.len());

        for (ordinal, doc) in docs.iter().enumerate() {
            let ordinal = ordinal as u32;
            let tokens = tokenize(&doc.text, analysis);
            doc_lengths.push(tokens.len() as u32);
            doc_ids.push(doc.id.clone());

            let mut tfs: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens.iter() {
                *tfs.entry(t).or_default() += 1;
            }
            // Documents are visited in ordinal order, so each posting list
            // stays sorted by ordinal.
            for (term, tf) in tfs {
                postings
                    .entry(term.to_string())
                    .or_default()
                    .push(Posting { doc: ordinal, tf });
            }
        }

        Self::from_parts(postings, doc_lengths, doc_ids, analysis.clone())
    }

    fn from_parts(
        postings: BTreeMap<String, Vec<Posting>>,
        doc_lengths: Vec<u32>,
        doc_ids: Vec<String>,
        analysis: AnalysisConfig,
    ) -> Self {
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64
        };
        let ordinals = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Self {
            postings,
            doc_lengths,
            avg_doc_length,
            doc_ids,
            ordinals,
            analysis,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn doc_id(&self, ordinal: usize) -> Option<&str> {
        self.doc_ids.get(ordinal).map(String::as_str)
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<usize> {
        self.ordinals.get(doc_id).map(|&o| o as usize)
    }

    pub fn analysis(&self) -> &AnalysisConfig {
        &self.analysis
    }

    pub fn tokenize_query(&self, text: &str) -> TokenList {
        tokenize(text, &self.analysis)
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self.doc_count(), self.document_frequency(term))
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: usize, params: Bm25Params) -> f64 {
        let tf = f64::from(tf);
        let len = f64::from(self.doc_lengths[doc]);
        let norm = 1.0 - params.b + params.b * len / self.avg_doc_length;
        idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    /// BM25 score of one document for an already-tokenized query.
    pub fn score(&self, query: &TokenList, doc: usize, params: Bm25Params) -> Result<f64, Bm25Error> {
        if doc >= self.doc_count() {
            return Err(Bm25Error::OrdinalOutOfRange {
                ordinal: doc,
                doc_count: self.doc_count(),
            });
        }
        let mut score = 0.0;
        for term in query.iter() {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            if let Ok(pos) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += self.term_weight(idf(self.doc_count(), list.len()), list[pos].tf, doc, params);
            }
        }
        Ok(score)
    }

    /// Top-`k` documents for `query` by BM25, ties broken by ascending external
    /// id. Documents scoring zero are never returned.
    pub fn search(&self, query: &Query, k: usize, params: Bm25Params) -> RankedList {
        self.search_text(&query.text, k, params)
    }

    pub fn search_text(&self, text: &str, k: usize, params: Bm25Params) -> RankedList {
        self.search_tokens(&self.tokenize_query(text), k, params)
    }

    pub fn search_tokens(&self, query: &TokenList, k: usize, params: Bm25Params) -> RankedList {
        if k == 0 || self.doc_count() == 0 {
            return RankedList::default();
        }
        // Term-at-a-time accumulation in query-token order, which keeps the
        // per-document summation order identical to `score`.
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in query.iter() {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = idf(self.doc_count(), list.len());
            for p in list {
                *acc.entry(p.doc).or_insert(0.0) += self.term_weight(idf, p.tf, p.doc as usize, params);
            }
        }
        let mut hits: Vec<(u32, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
        let by_rank = |a: &(u32, f64), b: &(u32, f64)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.doc_ids[a.0 as usize].cmp(&self.doc_ids[b.0 as usize]))
        };
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, by_rank);
            hits.truncate(k);
        }
        hits.sort_unstable_by(by_rank);
        RankedList {
            entries: hits
                .into_iter()
                .map(|(d, s)| (self.doc_ids[d as usize].clone(), s))
                .collect(),
        }
    }

    /// Write `index.json` under `dir`, creating the directory if needed.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, Bm25Error> {
        let path = dir.join(SNAPSHOT_FILE);
        let io_err = |source| Bm25Error::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io_err)?;
        let snapshot = Snapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            analysis: self.analysis.clone(),
            doc_ids: self.doc_ids.clone(),
            doc_lengths: self.doc_lengths.clone(),
            postings: self
                .postings
                .iter()
                .map(|(t, ps)| (t.clone(), ps.iter().map(|p| (p.doc, p.tf)).collect()))
                .collect(),
        };
        let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
        serde_json::to_writer(&mut w, &snapshot).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err)?;
        Ok(path)
    }

    /// Load a snapshot from a directory containing `index.json` or from the
    /// file itself.
    pub fn load(path: &Path) -> Result<Self, Bm25Error> {
        let path = if path.is_dir() {
            path.join(SNAPSHOT_FILE)
        } else {
            path.to_path_buf()
        };
        let bad = |message: String| Bm25Error::Snapshot {
            path: path.clone(),
            message,
        };
        let file = File::open(&path).map_err(|source| Bm25Error::Io {
            path: path.clone(),
            source,
        })?;
        let snap: Snapshot =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| bad(e.to_string()))?;
        if snap.format != SNAPSHOT_FORMAT {
            return Err(bad(format!("unexpected format {:?}", snap.format)));
        }
        if snap.version != SNAPSHOT_VERSION {
            return Err(bad(format!("unsupported version {}", snap.version)));
        }
        if snap.doc_ids.len() != snap.doc_lengths.len() {
            return Err(bad("doc_ids and doc_lengths differ in length".into()));
        }
        let n = snap.doc_ids.len() as u32;
        let mut postings = BTreeMap::new();
        for (term, list) in snap.postings {
            let list: Vec<Posting> = list.into_iter().map(|(doc, tf)| Posting { doc, tf }).collect();
            let sorted = list.windows(2).all(|w| w[0].doc < w[1].doc);
            if !sorted || list.iter().any(|p| p.doc >= n || p.tf == 0) {
                return Err(bad(format!("invalid postings for term {term:?}")));
            }
            postings.insert(term, list);
        }
        Ok(Self::from_parts(postings, snap.doc_lengths, snap.doc_ids, snap.analysis))
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    analysis: AnalysisConfig,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    postings: Vec<(String, Vec<(u32, u32)>)>,
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`.
pub fn idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

pub fn build_index(docs: &DocumentCollection, analysis: &AnalysisConfig) -> InvertedIndex {
    InvertedIndex::build(docs, analysis)
}

pub fn bm25_score(
    index: &InvertedIndex,
    query_tokens: &TokenList,
    doc: usize,
    params: Bm25Params,
) -> Result<f64, Bm25Error> {
    index.score(query_tokens, doc, params)
}

pub fn search(index: &InvertedIndex, query: &Query, k: usize, params: Bm25Params) -> RankedList {
    index.search(query, k, params)
}

/// Ranked `(doc_id, score)` pairs, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedList {
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use proptest::prelude::*;

    fn collection(texts: &[&str]) -> DocumentCollection {
        DocumentCollection::from_items(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), *t)),
        )
        .unwrap()
    }

    fn toks(text: &str) -> TokenList {
        tokenize(text, &AnalysisConfig::default())
    }

    #[test]
    fn build_counts_terms() {
        let idx = build_index(&collection(&["a b a", "b c"]), &AnalysisConfig::default());
        assert_eq!(idx.doc_count(), 2);
        assert_eq!(idx.postings("a").unwrap(), [Posting { doc: 0, tf: 2 }]);
        assert_eq!(
            idx.postings("b").unwrap(),
            [Posting { doc: 0, tf: 1 }, Posting { doc: 1, tf: 1 }]
        );
        assert_eq!(idx.postings("c").unwrap(), [Posting { doc: 1, tf: 1 }]);
        assert_eq!(idx.avg_doc_length(), 2.5);
    }

    #[test]
    fn empty_and_single_doc_index() {
        let idx = build_index(&collection(&[]), &AnalysisConfig::default());
        assert_eq!(idx.doc_count(), 0);
        assert_eq!(idx.terms().count(), 0);
        assert_eq!(idx.avg_doc_length(), 0.0);
        assert!(idx.search_text("anything", 5, Bm25Params::default()).is_empty());

        let idx = build_index(&collection(&["x x x"]), &AnalysisConfig::default());
        assert_eq!(idx.doc_lengths(), [3]);
        assert_eq!(idx.postings("x").unwrap(), [Posting { doc: 0, tf: 3 }]);
    }

    #[test]
    fn absent_term_scores_zero() {
        let idx = build_index(&collection(&["owls hunt", "bats fly"]), &AnalysisConfig::default());
        assert_eq!(idx.score(&toks("owls"), 1, Bm25Params::default()).unwrap(), 0.0);
        assert!(idx.search_text("whales", 10, Bm25Params::default()).is_empty());
    }

    #[test]
    fn ordinal_out_of_range() {
        let idx = build_index(&collection(&["a"]), &AnalysisConfig::default());
        assert!(matches!(
            idx.score(&toks("a"), 1, Bm25Params::default()),
            Err(Bm25Error::OrdinalOutOfRange { ordinal: 1, doc_count: 1 })
        ));
    }

    #[test]
    fn hand_checked_four_doc_score() {
        // Independent formula evaluation: N=4, df(owls)=2, doc 0 has len 4, tf 1,
        // avgdl = (4 + 3 + 3 + 2) / 4 = 3.
        let idx = build_index(
            &collection(&[
                "owls hunt at night",
                "bats use echolocation",
                "owls have eyes",
                "cats sleep",
            ]),
            &AnalysisConfig::default(),
        );
        let (k1, b) = (1.2_f64, 0.75_f64);
        let idf = (1.0_f64 + (4.0 - 2.0 + 0.5) / (2.0 + 0.5)).ln();
        let expected = idf * 1.0 * (k1 + 1.0) / (1.0 + k1 * (1.0 - b + b * 4.0 / 3.0));
        let got = idx.score(&toks("owls"), 0, Bm25Params { k1, b }).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        let twice = idx.score(&toks("owls owls"), 0, Bm25Params { k1, b }).unwrap();
        assert!((twice - 2.0 * got).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let docs = DocumentCollection::from_items([
            Document::new("zeta", "owl"),
            Document::new("alpha", "owl"),
            Document::new("mid", "owl"),
        ])
        .unwrap();
        let idx = build_index(&docs, &AnalysisConfig::default());
        let ranked = idx.search_text("owl", 10, Bm25Params::default());
        assert_eq!(ranked.doc_ids().collect::<Vec<_>>(), ["alpha", "mid", "zeta"]);
        let top1 = idx.search_text("owl", 1, Bm25Params::default());
        assert_eq!(top1.doc_ids().collect::<Vec<_>>(), ["alpha"]);
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = AnalysisConfig {
            lowercase: true,
            stopwords: Some(["the".to_string()].into_iter().collect()),
        };
        let idx = build_index(&collection(&["The owl", "the bat and the owl", "Cat"]), &cfg);
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let back = InvertedIndex::load(dir.path()).unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn snapshot_rejects_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SNAPSHOT_FILE);
        std::fs::write(
            &p,
            r#"{"format":"qrt-bm25-index","version":9,"analysis":{"lowercase":true},"doc_ids":[],"doc_lengths":[],"postings":[]}"#,
        )
        .unwrap();
        let err = InvertedIndex::load(&p).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn idf_is_positive() {
        for n in 1..50 {
            for df in 0..=n {
                assert!(idf(n, df) > 0.0);
            }
        }
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(
            proptest::collection::vec(proptest::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 0..8)
                .prop_map(|w| w.join(" ")),
            1..50,
        )
    }

    proptest! {
        #[test]
        fn search_matches_exhaustive_scoring(
            texts in arb_corpus(),
            query in proptest::collection::vec(proptest::sample::select(vec!["a", "b", "c", "x"]), 1..5),
        ) {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let idx = build_index(&collection(&refs), &AnalysisConfig::default());
            let params = Bm25Params::default();
            let q = toks(&query.join(" "));
            let mut brute: Vec<(String, f64)> = (0..idx.doc_count())
                .map(|d| (idx.doc_id(d).unwrap().to_string(), idx.score(&q, d, params).unwrap()))
                .filter(|(_, s)| *s > 0.0)
                .collect();
            brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            let ranked = idx.search_tokens(&q, idx.doc_count(), params);
            prop_assert_eq!(ranked.entries, brute);
        }

        #[test]
        fn extra_occurrence_never_lowers_score(tf in 1u32..20, len in 20u32..40, avg in 1.0f64..40.0) {
            // Fixed document length, varying term frequency.
            let idx = InvertedIndex::from_parts(BTreeMap::new(), vec![len], vec!["d".into()], AnalysisConfig::default());
            let idx = InvertedIndex { avg_doc_length: avg, ..idx };
            let p = Bm25Params::default();
            prop_assert!(idx.term_weight(1.0, tf + 1, 0, p) >= idx.term_weight(1.0, tf, 0, p));
        }
    }
}
