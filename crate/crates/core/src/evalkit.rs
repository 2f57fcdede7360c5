//! nDCG evaluation, TREC run files and run comparison.
//!
//! Run files use the six-column TREC layout `query_id Q0 doc_id rank score tag`.
//! Rewrite files are JSON-lines `{"id": .., "text": ..}`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{Bm25Params, InvertedIndex, RankedList};
use crate::corpus::{QrelSet, Query, QuerySet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("run for query {query_id:?}: {message}")]
    InvalidRun { query_id: String, message: String },
    #[error("no rewrite for query {0:?}")]
    MissingRewrite(String),
    #[error("reports use different cutoffs ({a} vs {b})")]
    CutoffMismatch { a: usize, b: usize },
    #[error("query sets differ; only in first: {only_a:?}; only in second: {only_b:?}")]
    QuerySetMismatch {
        only_a: Vec<String>,
        only_b: Vec<String>,
    },
}

impl EvalError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

/// Ranked results per query. Ranks are `1..=n` and scores never increase
/// down a list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    runs: BTreeMap<String, Vec<RunEntry>>,
}

fn check_entries(query_id: &str, entries: &[RunEntry]) -> Result<()> {
    let invalid = |message: String| {
        Err(EvalError::InvalidRun {
            query_id: query_id.to_string(),
            message,
        })
    };
    let mut docs = BTreeSet::new();
    for (i, e) in entries.iter().enumerate() {
        if e.rank != i + 1 {
            return invalid(format!("expected rank {}, found {}", i + 1, e.rank));
        }
        if !e.score.is_finite() {
            return invalid(format!("non-finite score at rank {}", e.rank));
        }
        if i > 0 && e.score > entries[i - 1].score {
            return invalid(format!("score increases at rank {}", e.rank));
        }
        if !docs.insert(e.doc_id.as_str()) {
            return invalid(format!("document {:?} listed twice", e.doc_id));
        }
    }
    Ok(())
}

impl RunFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store a ranked list for `query_id`, replacing any previous one.
    pub fn insert(&mut self, query_id: impl Into<String>, ranking: RankedList) {
        let entries = ranking
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RunEntry {
                doc_id,
                rank: i + 1,
                score,
            })
            .collect();
        self.runs.insert(query_id.into(), entries);
    }

    pub fn get(&self, query_id: &str) -> Option<&[RunEntry]> {
        self.runs.get(query_id).map(Vec::as_slice)
    }

    pub fn doc_ids(&self, query_id: &str) -> Vec<&str> {
        self.get(query_id)
            .map(|e| e.iter().map(|r| r.doc_id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.runs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.runs.iter().try_for_each(|(q, e)| check_entries(q, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| EvalError::io(path, e))?;
        let mut runs: BTreeMap<String, Vec<RunEntry>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| EvalError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| EvalError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 6 {
                return Err(malformed(format!("expected 6 columns, found {}", cols.len())));
            }
            let rank = cols[3]
                .parse()
                .map_err(|_| malformed(format!("bad rank {:?}", cols[3])))?;
            let score = cols[4]
                .parse()
                .map_err(|_| malformed(format!("bad score {:?}", cols[4])))?;
            runs.entry(cols[0].to_string()).or_default().push(RunEntry {
                doc_id: cols[2].to_string(),
                rank,
                score,
            });
        }
        for entries in runs.values_mut() {
            entries.sort_by_key(|e| e.rank);
        }
        let run = Self { runs };
        run.validate()?;
        Ok(run)
    }

    pub fn write_to<W: Write>(&self, mut w: W, tag: &str) -> io::Result<()> {
        for (q, entries) in &self.runs {
            for e in entries {
                writeln!(w, "{q} Q0 {} {} {} {tag}", e.doc_id, e.rank, e.score)?;
            }
        }
        w.flush()
    }

    pub fn save(&self, path: &Path, tag: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| EvalError::io(path, e))?;
        self.write_to(BufWriter::new(file), tag)
            .map_err(|e| EvalError::io(path, e))
    }
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .fold(0.0, |acc, (i, g)| acc + (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
}

/// nDCG@k with exponential gain `2^rel - 1` and discount `log2(rank + 1)`.
///
/// The ideal DCG uses every judged grade of the query. A query without any
/// positively graded document scores 0.
///
/// # Panics
/// If `k == 0`.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], qrels: &QrelSet, query_id: &str, k: usize) -> f64 {
    assert!(k >= 1, "nDCG cutoff must be at least 1");
    let Some(judged) = qrels.judgments(query_id) else {
        return 0.0;
    };
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return 0.0;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    let actual = dcg(
        ranking
            .iter()
            .take(k)
            .map(|d| judged.get(d.as_ref()).copied().unwrap_or(0)),
    );
    (actual / idcg).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    /// Leave out queries that have no relevant judgments or no results,
    /// instead of scoring them 0.
    pub skip_unjudged: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 10,
            skip_unjudged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
}

impl EvalReport {
    fn from_scores(k: usize, per_query: BTreeMap<String, f64>) -> Self {
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.values().sum::<f64>() / per_query.len() as f64
        };
        Self { k, mean, per_query }
    }

    pub fn query_count(&self) -> usize {
        self.per_query.len()
    }

    /// Aligned two-column table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let label = format!("ndcg@{}", self.k);
        let width = self
            .per_query
            .keys()
            .map(String::len)
            .chain(["query".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {label:>9}", "query");
        for (q, v) in &self.per_query {
            let _ = writeln!(out, "{q:<width$}  {v:>9.4}");
        }
        let _ = writeln!(out, "{:<width$}  {:>9.4}", "mean", self.mean);
        out
    }
}

/// Score every query that appears in `qrels`.
pub fn evaluate_run(run: &RunFile, qrels: &QrelSet, options: EvalOptions) -> EvalReport {
    let ids: Vec<&str> = qrels.query_ids().collect();
    let scored: Vec<Option<(String, f64)>> = ids
        .par_iter()
        .map(|&q| {
            let ranking = run.doc_ids(q);
            if options.skip_unjudged {
                let judged = qrels
                    .judgments(q)
                    .is_some_and(|j| j.values().any(|&g| g > 0));
                if !judged || ranking.is_empty() {
                    return None;
                }
            }
            Some((q.to_string(), ndcg_at_k(&ranking, qrels, q, options.k)))
        })
        .collect();
    EvalReport::from_scores(options.k, scored.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDelta {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_delta: f64,
    pub per_query: BTreeMap<String, QueryDelta>,
    pub improved: usize,
    pub degraded: usize,
    pub tied: usize,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let width = self
            .per_query
            .keys()
            .map(String::len)
            .chain(["query".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9}", "query", "a", "b", "delta");
        for (q, d) in &self.per_query {
            let _ = writeln!(out, "{q:<width$}  {:>9.4}  {:>9.4}  {:>+9.4}", d.a, d.b, d.delta);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>+9.4}",
            "mean", self.mean_a, self.mean_b, self.mean_delta
        );
        let _ = writeln!(
            out,
            "improved {}  degraded {}  tied {}",
            self.improved, self.degraded, self.tied
        );
        out
    }
}

/// Per-query and mean differences `b - a`.
pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    if a.k != b.k {
        return Err(EvalError::CutoffMismatch { a: a.k, b: b.k });
    }
    let only_a: Vec<String> = a
        .per_query
        .keys()
        .filter(|q| !b.per_query.contains_key(*q))
        .cloned()
        .collect();
    let only_b: Vec<String> = b
        .per_query
        .keys()
        .filter(|q| !a.per_query.contains_key(*q))
        .cloned()
        .collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(EvalError::QuerySetMismatch { only_a, only_b });
    }
    let mut cmp = Comparison {
        k: a.k,
        mean_a: a.mean,
        mean_b: b.mean,
        mean_delta: b.mean - a.mean,
        per_query: BTreeMap::new(),
        improved: 0,
        degraded: 0,
        tied: 0,
    };
    for (q, &va) in &a.per_query {
        let vb = b.per_query[q];
        let delta = vb - va;
        match delta {
            d if d > 0.0 => cmp.improved += 1,
            d if d < 0.0 => cmp.degraded += 1,
            _ => cmp.tied += 1,
        }
        cmp.per_query.insert(q.clone(), QueryDelta { a: va, b: vb, delta });
    }
    Ok(cmp)
}

/// Maps a query to the text that is sent to the retriever.
pub trait Rewriter: Sync {
    fn rewrite(&self, query: &Query) -> Result<String>;
}

pub struct IdentityRewriter;

impl Rewriter for IdentityRewriter {
    fn rewrite(&self, query: &Query) -> Result<String> {
        Ok(query.text.clone())
    }
}

/// Rewrites looked up by query id.
#[derive(Debug, Clone, Default)]
pub struct MapRewriter {
    rewrites: HashMap<String, String>,
}

#[derive(Deserialize)]
struct RewriteLine {
    id: String,
    text: String,
}

impl MapRewriter {
    pub fn new(rewrites: HashMap<String, String>) -> Self {
        Self { rewrites }
    }

    /// Read a rewrite JSON-lines file. A repeated id keeps the last line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| EvalError::io(path, e))?;
        let mut rewrites = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| EvalError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RewriteLine = serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            rewrites.insert(r.id, r.text);
        }
        Ok(Self { rewrites })
    }

    pub fn len(&self) -> usize {
        self.rewrites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewrites.is_empty()
    }
}

impl Rewriter for MapRewriter {
    fn rewrite(&self, query: &Query) -> Result<String> {
        self.rewrites
            .get(&query.id)
            .cloned()
            .ok_or_else(|| EvalError::MissingRewrite(query.id.clone()))
    }
}

/// Rewrite each query, then retrieve the top `k` with BM25.
pub fn rewrite_and_retrieve<R: Rewriter + ?Sized>(
    queries: &QuerySet,
    rewriter: &R,
    index: &InvertedIndex,
    k: usize,
    params: Bm25Params,
) -> Result<RunFile> {
    let ranked: Vec<(String, RankedList)> = queries
        .as_slice()
        .par_iter()
        .map(|q| Ok((q.id.clone(), index.search_text(&rewriter.rewrite(q)?, k, params))))
        .collect::<Result<_>>()?;
    let mut run = RunFile::new();
    for (q, r) in ranked {
        run.insert(q, r);
    }
    Ok(run)
}
