//! Documents, queries, relevance judgments and training samples.
//!
//! On-disk formats:
//!
//! - documents / queries: JSON-lines, one `{"id": .., "text": ..}` per line
//! - qrels: TSV, `query_id<TAB>doc_id<TAB>grade`
//! - training samples: JSON-lines `{"query": .., "positives": [..], "category": ..}`

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
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
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("empty id")]
    EmptyId,
    #[error("empty text for id {0:?}")]
    EmptyText(String),
    #[error("{path}:{line}: negative grade {grade} for ({query_id}, {doc_id})")]
    NegativeGrade {
        path: PathBuf,
        line: usize,
        query_id: String,
        doc_id: String,
        grade: i64,
    },
    #[error("duplicate judgment for ({query_id}, {doc_id})")]
    DuplicatePair { query_id: String, doc_id: String },
    #[error("training sample {0:?} has no positive documents")]
    EmptyPositives(String),
    #[error("qrels reference unknown query {0:?}")]
    UnknownQuery(String),
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Ingestion options for [`load_documents`].
#[derive(Debug, Clone, Copy, Default)]
pub struct IngestConfig {
    pub allow_empty_text: bool,
}

/// Ordered set of records with unique, non-empty ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collection<T> {
    items: Vec<T>,
    by_id: HashMap<String, usize>,
}

pub type DocumentCollection = Collection<Document>;
pub type QuerySet = Collection<Query>;

/// Records addressable by a string id.
pub trait Identified {
    fn id(&self) -> &str;
}

impl Identified for Document {
    fn id(&self) -> &str {
        &self.id
    }
}

impl Identified for Query {
    fn id(&self) -> &str {
        &self.id
    }
}

impl<T: Identified> Collection<T> {
    pub fn new() -> Self {
        Self {
            items: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn push(&mut self, item: T) -> Result<()> {
        let id = item.id();
        if id.is_empty() {
            return Err(CorpusError::EmptyId);
        }
        if self.by_id.contains_key(id) {
            return Err(CorpusError::DuplicateId(id.to_string()));
        }
        self.by_id.insert(id.to_string(), self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn from_items(items: impl IntoIterator<Item = T>) -> Result<Self> {
        let mut c = Self::new();
        for item in items {
            c.push(item)?;
        }
        Ok(c)
    }

    pub fn get(&self, id: &str) -> Option<&T> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.items
    }
}

impl<'a, T> IntoIterator for &'a Collection<T> {
    type Item = &'a T;
    type IntoIter = std::slice::Iter<'a, T>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CorpusError::io(path, e))
}

/// Non-blank lines of a file with 1-based line numbers.
fn numbered_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn load_records(path: &Path, allow_empty_text: bool) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in numbered_lines(path)? {
        let rec: RawRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::malformed(path, lineno, e.to_string()))?;
        if rec.id.is_empty() {
            return Err(CorpusError::malformed(path, lineno, "empty id"));
        }
        if !allow_empty_text && rec.text.trim().is_empty() {
            return Err(CorpusError::EmptyText(rec.id));
        }
        out.push((rec.id, rec.text));
    }
    Ok(out)
}

pub fn load_documents(path: &Path, config: IngestConfig) -> Result<DocumentCollection> {
    Collection::from_items(
        load_records(path, config.allow_empty_text)?
            .into_iter()
            .map(|(id, text)| Document { id, text }),
    )
}

/// Queries use the document format; empty query text is always rejected.
pub fn load_queries(path: &Path) -> Result<QuerySet> {
    Collection::from_items(
        load_records(path, false)?
            .into_iter()
            .map(|(id, text)| Query { id, text }),
    )
}

fn write_records<'a>(
    path: &Path,
    records: impl Iterator<Item = (&'a str, &'a str)>,
) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        id: &'a str,
        text: &'a str,
    }
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, text) in records {
        let line = serde_json::to_string(&Out { id, text }).expect("string fields serialize");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn write_documents(path: &Path, docs: &DocumentCollection) -> Result<()> {
    write_records(path, docs.iter().map(|d| (d.id.as_str(), d.text.as_str())))
}

pub fn write_queries(path: &Path, queries: &QuerySet) -> Result<()> {
    write_records(path, queries.iter().map(|q| (q.id.as_str(), q.text.as_str())))
}

/// Graded relevance judgments keyed by `(query_id, doc_id)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QrelSet {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Result<()> {
        let per_query = self.grades.entry(query_id.to_string()).or_default();
        if per_query.contains_key(doc_id) {
            return Err(CorpusError::DuplicatePair {
                query_id: query_id.to_string(),
                doc_id: doc_id.to_string(),
            });
        }
        per_query.insert(doc_id.to_string(), grade);
        Ok(())
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.grades.get(query_id)?.get(doc_id).copied()
    }

    /// Judgments for one query, keyed by doc id.
    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(query_id)
    }

    /// Query ids with at least one judgment, sorted.
    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    /// Every judged query must exist in `queries`.
    pub fn validate_against(&self, queries: &QuerySet) -> Result<()> {
        match self.query_ids().find(|q| queries.get(q).is_none()) {
            Some(q) => Err(CorpusError::UnknownQuery(q.to_string())),
            None => Ok(()),
        }
    }
}

/// Parse a qrels file. Fields may be separated by tabs or runs of spaces; a
/// four-column TREC qrels line (`qid 0 docid grade`) is also accepted.
pub fn load_qrels(path: &Path) -> Result<QrelSet> {
    let mut qrels = QrelSet::new();
    for (lineno, line) in numbered_lines(path)? {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (qid, did, grade) = match fields.as_slice() {
            [q, d, g] => (*q, *d, *g),
            [q, _, d, g] => (*q, *d, *g),
            _ => {
                return Err(CorpusError::malformed(
                    path,
                    lineno,
                    format!("expected 3 fields, found {}", fields.len()),
                ))
            }
        };
        let grade: i64 = grade
            .parse()
            .map_err(|_| CorpusError::malformed(path, lineno, format!("bad grade {grade:?}")))?;
        if grade < 0 {
            return Err(CorpusError::NegativeGrade {
                path: path.to_path_buf(),
                line: lineno,
                query_id: qid.to_string(),
                doc_id: did.to_string(),
                grade,
            });
        }
        let grade = u32::try_from(grade)
            .map_err(|_| CorpusError::malformed(path, lineno, "grade out of range"))?;
        qrels.insert(qid, did, grade)?;
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &QrelSet) -> Result<()> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (qid, docs) in &qrels.grades {
        for (did, grade) in docs {
            writeln!(w, "{qid}\t{did}\t{grade}").map_err(|e| CorpusError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// One `<query, positives>` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub query: Query,
    pub positives: Vec<Document>,
    pub category: Option<String>,
}

impl TrainingSample {
    /// Checks `|positives| >= 1` and distinct positive ids.
    pub fn new(query: Query, positives: Vec<Document>, category: Option<String>) -> Result<Self> {
        if positives.is_empty() {
            return Err(CorpusError::EmptyPositives(query.id));
        }
        let mut seen = HashSet::new();
        for p in &positives {
            if !seen.insert(p.id.as_str()) {
                return Err(CorpusError::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self {
            query,
            positives,
            category,
        })
    }

    /// Build a sample from raw texts; positives get ids `{id}-p{i}`.
    pub fn from_texts(
        id: impl Into<String>,
        query: impl Into<String>,
        positives: impl IntoIterator<Item = String>,
        category: Option<String>,
    ) -> Result<Self> {
        let id = id.into();
        let positives = positives
            .into_iter()
            .enumerate()
            .map(|(i, text)| Document::new(format!("{id}-p{i}"), text))
            .collect();
        Self::new(Query::new(id, query), positives, category)
    }

    pub fn id(&self) -> &str {
        &self.query.id
    }
}

pub type TrainingSet = Vec<TrainingSample>;

#[derive(Serialize, Deserialize)]
struct RawSample {
    query: String,
    positives: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

/// Load training samples; sample ids are `s{n}` where `n` counts non-blank
/// lines from zero.
pub fn load_training_samples(path: &Path) -> Result<TrainingSet> {
    numbered_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(n, (lineno, line))| {
            let raw: RawSample = serde_json::from_str(&line)
                .map_err(|e| CorpusError::malformed(path, lineno, e.to_string()))?;
            if raw.positives.is_empty() {
                return Err(CorpusError::malformed(
                    path,
                    lineno,
                    "\"positives\" must be a non-empty array",
                ));
            }
            TrainingSample::from_texts(format!("s{n}"), raw.query, raw.positives, raw.category)
        })
        .collect()
}

pub fn write_training_samples(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let raw = RawSample {
            query: s.query.text.clone(),
            positives: s.positives.iter().map(|d| d.text.clone()).collect(),
            category: s.category.clone(),
        };
        let line = serde_json::to_string(&raw).expect("string fields serialize");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_documents_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            "{\"id\":\"d1\",\"text\":\"owls hunt at night\"}\n{\"id\":\"d2\",\"text\":\"bats use echolocation\"}\n",
        );
        let docs = load_documents(&p, IngestConfig::default()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs.as_slice()[0].id, "d1");
        assert_eq!(docs.get("d2").unwrap().text, "bats use echolocation");
    }

    #[test]
    fn empty_file_is_empty_collection() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.jsonl", "");
        assert!(load_documents(&p, IngestConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_document_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            "{\"id\":\"d1\",\"text\":\"a\"}\n{\"id\":\"d1\",\"text\":\"b\"}\n",
        );
        let err = load_documents(&p, IngestConfig::default()).unwrap_err();
        assert!(matches!(&err, CorpusError::DuplicateId(id) if id == "d1"));
        assert!(err.to_string().contains("d1"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.jsonl", "{\"id\":\"d1\",\"text\":\"a\"}\n{oops\n");
        let err = load_documents(&p, IngestConfig::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_text_needs_opt_in() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.jsonl", "{\"id\":\"d1\",\"text\":\"\"}\n");
        assert!(matches!(
            load_documents(&p, IngestConfig::default()),
            Err(CorpusError::EmptyText(_))
        ));
        let docs = load_documents(&p, IngestConfig { allow_empty_text: true }).unwrap();
        assert_eq!(docs.len(), 1);
        assert!(load_queries(&p).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_documents(Path::new("/nonexistent/x.jsonl"), IngestConfig::default())
            .unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }

    #[test]
    fn qrels_parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "q.tsv", "q1\td1\t1\n");
        let q = load_qrels(&p).unwrap();
        assert_eq!(q.grade("q1", "d1"), Some(1));
        assert_eq!(q.len(), 1);

        let p = write(&dir, "neg.tsv", "q1\td1\t-2\n");
        assert!(matches!(load_qrels(&p), Err(CorpusError::NegativeGrade { grade: -2, .. })));

        let p = write(&dir, "dup.tsv", "q1\td1\t1\nq1\td1\t2\n");
        assert!(matches!(load_qrels(&p), Err(CorpusError::DuplicatePair { .. })));

        let p = write(&dir, "bad.tsv", "q1\td1\n");
        assert!(matches!(load_qrels(&p), Err(CorpusError::Malformed { line: 1, .. })));
    }

    #[test]
    fn trec_style_qrels_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "q.txt", "q1 0 d1 2\nq1 0 d2 0\n");
        let q = load_qrels(&p).unwrap();
        assert_eq!(q.grade("q1", "d1"), Some(2));
        assert_eq!(q.grade("q1", "d2"), Some(0));
    }

    #[test]
    fn qrels_validation_against_queries() {
        let mut qrels = QrelSet::new();
        qrels.insert("q1", "d1", 1).unwrap();
        qrels.insert("q9", "d1", 1).unwrap();
        let queries = QuerySet::from_items([Query::new("q1", "x")]).unwrap();
        assert!(matches!(
            qrels.validate_against(&queries),
            Err(CorpusError::UnknownQuery(q)) if q == "q9"
        ));
    }

    #[test]
    fn training_samples_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "s.jsonl",
            "{\"query\":\"why is sky blue\",\"positives\":[\"rayleigh scattering ...\"]}\n\
             {\"query\":\"b\",\"positives\":[\"x\",\"y\"],\"category\":\"physics\"}\n\
             {\"query\":\"c\",\"positives\":[\"z\"]}\n",
        );
        let set = load_training_samples(&p).unwrap();
        assert_eq!(set.len(), 3);
        let ids: Vec<_> = set.iter().map(|s| s.id()).collect();
        assert_eq!(ids, ["s0", "s1", "s2"]);
        assert_eq!(set[0].positives.len(), 1);
        assert_eq!(set[1].category.as_deref(), Some("physics"));
    }

    #[test]
    fn empty_positives_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.jsonl", "{\"query\":\"q\",\"positives\":[]}\n");
        let err = load_training_samples(&p).unwrap_err();
        assert!(err.to_string().contains("non-empty"), "{err}");
        assert!(TrainingSample::from_texts("s", "q", Vec::new(), None).is_err());
    }

    #[test]
    fn training_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            TrainingSample::from_texts("s0", "q a", vec!["d".into()], Some("cs".into())).unwrap(),
            TrainingSample::from_texts("s1", "q b", vec!["e".into(), "f".into()], None).unwrap(),
        ];
        let p = dir.path().join("s.jsonl");
        write_training_samples(&p, &samples).unwrap();
        assert_eq!(load_training_samples(&p).unwrap(), samples);
    }

    proptest! {
        #[test]
        fn documents_round_trip(texts in proptest::collection::vec("\\PC{1,30}", 0..12)) {
            let docs = DocumentCollection::from_items(
                texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), t.clone())),
            ).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("docs.jsonl");
            write_documents(&p, &docs).unwrap();
            let back = load_documents(&p, IngestConfig { allow_empty_text: true }).unwrap();
            prop_assert_eq!(back.as_slice(), docs.as_slice());
        }
    }
}
