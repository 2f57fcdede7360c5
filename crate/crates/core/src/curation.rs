//! Training-set construction from question/answer records.
//!
//! Input records are JSON-lines:
//!
//! ```text
//! {"question_id": "..", "question": "..", "category": "biology",
//!  "answers": [{"text": "..", "selected": true}, ...]}
//! ```
//!
//! V2 takes each question's selected answer as its positive. V1 takes an
//! externally generated answer, looked up by question id. Both sample up to a
//! per-category cap uniformly at random with a seeded reservoir.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, TrainingSample, TrainingSet};
use crate::hashing::{fnv1a64, stream_seed};

pub const V1_CATEGORIES: [&str; 9] = [
    "biology",
    "chemistry",
    "codereview",
    "cs",
    "earthscience",
    "economics",
    "math",
    "physics",
    "robotics",
];

pub const V2_CATEGORIES: [&str; 17] = [
    "ai",
    "biology",
    "chemistry",
    "codereview",
    "cs",
    "earthscience",
    "economics",
    "computergraphics",
    "math",
    "mathoverflow",
    "philosophy",
    "physics",
    "robotics",
    "stackoverflow",
    "sustainability",
    "softwareengineering",
    "bioinformatics",
];

pub const V1_CAP: usize = 1200;
pub const V2_CAP: usize = 1500;

#[derive(Debug, Error)]
pub enum CurationError {
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
    #[error("cap for category {0:?} must be at least 1")]
    InvalidCap(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T> = std::result::Result<T, CurationError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    #[serde(default)]
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub question_id: String,
    pub question: String,
    pub category: String,
    pub answers: Vec<Answer>,
}

impl QARecord {
    /// First answer marked selected.
    pub fn selected_answer(&self) -> Option<&Answer> {
        self.answers.iter().find(|a| a.selected)
    }

    pub fn selected_count(&self) -> usize {
        self.answers.iter().filter(|a| a.selected).count()
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|source| CurationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CurationError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CurationError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<QARecord>> {
    read_jsonl(path)
}

#[derive(Deserialize)]
struct GeneratedLine {
    question_id: String,
    text: String,
}

/// Generated answers as JSON-lines `{"question_id": .., "text": ..}`.
pub fn load_generated_answers(path: &Path) -> Result<HashMap<String, String>> {
    Ok(read_jsonl::<GeneratedLine>(path)?
        .into_iter()
        .map(|g| (g.question_id, g.text))
        .collect())
}

/// Caps as a JSON object `{"category": max_count, ...}`.
pub fn load_caps(path: &Path) -> Result<BTreeMap<String, usize>> {
    let raw = std::fs::read_to_string(path).map_err(|source| CurationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|e| CurationError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn default_caps(categories: &[&str], cap: usize) -> BTreeMap<String, usize> {
    categories.iter().map(|c| (c.to_string(), cap)).collect()
}

pub fn v1_caps() -> BTreeMap<String, usize> {
    default_caps(&V1_CATEGORIES, V1_CAP)
}

pub fn v2_caps() -> BTreeMap<String, usize> {
    default_caps(&V2_CATEGORIES, V2_CAP)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Substrings that introduce non-text payloads.
    pub markers: Vec<String>,
    pub min_answers: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            markers: vec!["<img".into(), "](http".into()],
            min_answers: 2,
        }
    }
}

fn closing_for(marker: &str) -> Option<char> {
    match marker.chars().rev().find(|c| matches!(c, '<' | '(' | '[')) {
        Some('<') => Some('>'),
        Some('(') => Some(')'),
        Some('[') => Some(']'),
        _ => None,
    }
}

/// Remove every marker payload from `text`.
///
/// A payload runs from the marker to the delimiter closing the marker's last
/// bracket (`<img ...>`, `...(http...)`), or to the next whitespace if the
/// marker has no bracket. A marker starting with `]` also takes the preceding
/// `[...]` and an optional `!`, covering markdown links and images.
pub fn strip_payloads(text: &str, markers: &[String]) -> String {
    let mut out = text.to_string();
    for m in markers.iter().filter(|m| !m.is_empty()) {
        let close = closing_for(m);
        while let Some(p) = out.find(m.as_str()) {
            let mut start = p;
            if m.starts_with(']') {
                if let Some(b) = out[..p].rfind('[') {
                    start = if out[..b].ends_with('!') { b - 1 } else { b };
                }
            }
            let after = p + m.len();
            let rest = &out[after..];
            let end = match close.and_then(|c| rest.find(c)) {
                Some(e) => after + e + 1,
                None => after + rest.find(char::is_whitespace).unwrap_or(rest.len()),
            };
            out.replace_range(start..end, " ");
        }
    }
    out
}

/// True when something other than whitespace remains after stripping
/// payloads.
pub fn is_text_only(text: &str, config: &FilterConfig) -> bool {
    !strip_payloads(text, &config.markers).trim().is_empty()
}

/// Keep records with at least `min_answers` answers whose question and every
/// answer pass [`is_text_only`].
pub fn filter_records<'a, I>(records: I, config: &'a FilterConfig) -> impl Iterator<Item = QARecord> + 'a
where
    I: IntoIterator<Item = QARecord>,
    I::IntoIter: 'a,
{
    records.into_iter().filter(move |r| {
        r.answers.len() >= config.min_answers
            && is_text_only(&r.question, config)
            && r.answers.iter().all(|a| is_text_only(&a.text, config))
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CurationReport {
    pub records_seen: usize,
    /// Records eligible for sampling, per category.
    pub eligible: BTreeMap<String, usize>,
    /// Emitted samples, per category.
    pub sampled: BTreeMap<String, usize>,
    /// Records with more than one selected answer (the first is used).
    pub extra_selected: usize,
    /// V1 only: sampled questions without a generated answer.
    pub missing_generated: usize,
    /// Cap categories that no input record belongs to.
    pub unknown_categories: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Curated {
    pub samples: TrainingSet,
    pub report: CurationReport,
}

/// Algorithm R over `(input position, record)` pairs.
struct Reservoir {
    cap: usize,
    seen: usize,
    rng: ChaCha8Rng,
    items: Vec<(usize, QARecord)>,
}

impl Reservoir {
    fn new(cap: usize, seed: u64) -> Self {
        Self {
            cap,
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            items: Vec::new(),
        }
    }

    fn offer(&mut self, pos: usize, record: QARecord) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push((pos, record));
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if j < self.cap {
                self.items[j] = (pos, record);
            }
        }
    }

    /// Sampled records in input order.
    fn into_sorted(mut self) -> Vec<QARecord> {
        self.items.sort_by_key(|(pos, _)| *pos);
        self.items.into_iter().map(|(_, r)| r).collect()
    }
}

fn sample_by_category<I, F>(
    records: I,
    caps: &BTreeMap<String, usize>,
    seed: u64,
    eligible: F,
    report: &mut CurationReport,
) -> Result<BTreeMap<String, Vec<QARecord>>>
where
    I: IntoIterator<Item = QARecord>,
    F: Fn(&QARecord) -> bool,
{
    if let Some((c, _)) = caps.iter().find(|(_, &cap)| cap == 0) {
        return Err(CurationError::InvalidCap(c.clone()));
    }
    let mut reservoirs: BTreeMap<&str, Reservoir> = caps
        .iter()
        .map(|(c, &cap)| (c.as_str(), Reservoir::new(cap, stream_seed(seed, &[fnv1a64(c)]))))
        .collect();
    let mut present = BTreeMap::new();
    for (pos, record) in records.into_iter().enumerate() {
        report.records_seen += 1;
        *present.entry(record.category.clone()).or_insert(0usize) += 1;
        if record.selected_count() > 1 {
            report.extra_selected += 1;
            log::warn!("question {} has {} selected answers", record.question_id, record.selected_count());
        }
        let Some(res) = reservoirs.get_mut(record.category.as_str()) else {
            continue;
        };
        if eligible(&record) {
            *report.eligible.entry(record.category.clone()).or_insert(0) += 1;
            res.offer(pos, record);
        }
    }
    for c in caps.keys() {
        if !present.contains_key(c) {
            log::warn!("category {c:?} has no input records");
            report.unknown_categories.push(c.clone());
        }
    }
    Ok(reservoirs
        .into_iter()
        .map(|(c, r)| (c.to_string(), r.into_sorted()))
        .collect())
}

/// Selected-answer training set. Records without a selected answer are not
/// eligible.
pub fn build_v2<I>(records: I, caps: &BTreeMap<String, usize>, seed: u64) -> Result<Curated>
where
    I: IntoIterator<Item = QARecord>,
{
    let mut report = CurationReport::default();
    let picked = sample_by_category(
        records,
        caps,
        seed,
        |r| r.selected_answer().is_some_and(|a| !a.text.trim().is_empty()),
        &mut report,
    )?;
    let mut samples = Vec::new();
    for (category, recs) in picked {
        report.sampled.insert(category.clone(), recs.len());
        for r in recs {
            let answer = r.selected_answer().expect("eligible").text.clone();
            samples.push(TrainingSample::from_texts(
                r.question_id,
                r.question,
                [answer],
                Some(category.clone()),
            )?);
        }
    }
    Ok(Curated { samples, report })
}

/// Generated-answer training set. Questions are sampled first; a sampled
/// question without a generated answer is skipped and counted.
pub fn build_v1<I>(
    records: I,
    generated: &HashMap<String, String>,
    caps: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Curated>
where
    I: IntoIterator<Item = QARecord>,
{
    let mut report = CurationReport::default();
    let picked = sample_by_category(records, caps, seed, |_| true, &mut report)?;
    let mut samples = Vec::new();
    for (category, recs) in picked {
        let mut n = 0;
        for r in recs {
            match generated.get(&r.question_id).filter(|t| !t.trim().is_empty()) {
                Some(answer) => {
                    samples.push(TrainingSample::from_texts(
                        r.question_id,
                        r.question,
                        [answer.clone()],
                        Some(category.clone()),
                    )?);
                    n += 1;
                }
                None => {
                    log::warn!("no generated answer for question {}", r.question_id);
                    report.missing_generated += 1;
                }
            }
        }
        report.sampled.insert(category, n);
    }
    Ok(Curated { samples, report })
}
