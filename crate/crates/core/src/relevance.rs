//! Embedding providers and cosine relevance.
//!
//! Three providers share the [`RelevanceProvider`] interface:
//!
//! - [`HashedEmbedder`]: deterministic hashed bag-of-words, hermetic.
//! - [`PrecomputedStore`]: vectors looked up by the SHA-256 of the text.
//! - [`RemoteEmbedder`]: JSON over HTTP (`POST {endpoint}/embed`), cached.
//!
//! Providers are read-only: nothing in the training loop mutates them.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{tokenize, truncate_tokens, AnalysisConfig};
use crate::hashing::{fnv1a64, sha256_hex};

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error("no precomputed vector for text with sha256 {0}")]
    MissingKey(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedding must have at least one dimension")]
    EmptyVector,
    #[error("remote embedding service failed after {attempts} attempt(s): {message}")]
    Remote { attempts: usize, message: String },
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
}

pub type Result<T> = std::result::Result<T, RelevanceError>;

/// Fixed-dimension, finite embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(RelevanceError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RelevanceError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = RelevanceError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(RelevanceError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    PrecomputedStore,
    HashedTestEmbedder,
    RemoteService,
}

pub trait RelevanceProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;

    fn dim(&self) -> usize;

    /// Declared input limit in tokens; longer texts are cut before embedding.
    fn max_tokens(&self) -> Option<usize> {
        None
    }

    /// Embed `text` as given, without length truncation.
    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector>;

    /// Embed several texts as given. Providers with a batch transport
    /// override this.
    fn embed_raw_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed_raw(t)).collect()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed_raw(self.truncate(text))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let cut: Vec<&str> = texts.iter().map(|t| self.truncate(t)).collect();
        self.embed_raw_batch(&cut)
    }

    fn truncate<'t>(&self, text: &'t str) -> &'t str {
        match self.max_tokens() {
            None => text,
            Some(max) => {
                let (cut, truncated) = truncate_tokens(text, max);
                if truncated {
                    log::warn!("input longer than {max} tokens truncated before embedding");
                }
                cut
            }
        }
    }
}

impl<P: RelevanceProvider + ?Sized> RelevanceProvider for &P {
    fn kind(&self) -> ProviderKind {
        (**self).kind()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn max_tokens(&self) -> Option<usize> {
        (**self).max_tokens()
    }
    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed_raw(text)
    }
    fn embed_raw_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_raw_batch(texts)
    }
}

impl<P: RelevanceProvider + ?Sized> RelevanceProvider for Box<P> {
    fn kind(&self) -> ProviderKind {
        (**self).kind()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn max_tokens(&self) -> Option<usize> {
        (**self).max_tokens()
    }
    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed_raw(text)
    }
    fn embed_raw_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_raw_batch(texts)
    }
}

pub fn embed<P: RelevanceProvider + ?Sized>(provider: &P, text: &str) -> Result<EmbeddingVector> {
    provider.embed(text)
}

/// `cosine(embed(q), embed(d))`.
pub fn relevance<P: RelevanceProvider + ?Sized>(provider: &P, q: &str, d: &str) -> Result<f64> {
    cosine(&provider.embed(q)?, &provider.embed(d)?)
}

/// Hashed bag-of-words: each token is hashed (FNV-1a 64) into one of `dim`
/// buckets, bucket counts are accumulated and the result is L2-normalized.
/// Texts without tokens embed to the zero vector.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    analysis: AnalysisConfig,
    max_tokens: Option<usize>,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            analysis: AnalysisConfig::default(),
            max_tokens: None,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: Option<usize>) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_analysis(mut self, analysis: AnalysisConfig) -> Self {
        self.analysis = analysis;
        self
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token) % self.dim as u64) as usize
    }
}

impl RelevanceProvider for HashedEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::HashedTestEmbedder
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> Option<usize> {
        self.max_tokens
    }

    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        let mut v = vec![0.0; self.dim];
        for t in tokenize(text, &self.analysis).iter() {
            v[self.bucket(t)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(EmbeddingVector(v))
    }
}

/// Vectors keyed by the SHA-256 hex digest of the exact text.
///
/// File format: JSON-lines `{"key": "<sha256 hex>", "vector": [..]}`.
#[derive(Debug, Clone)]
pub struct PrecomputedStore {
    dim: usize,
    vectors: HashMap<String, EmbeddingVector>,
}

#[derive(Serialize, Deserialize)]
struct StoreLine {
    key: String,
    vector: Vec<f64>,
}

impl PrecomputedStore {
    pub fn from_vectors(dim: usize, vectors: HashMap<String, EmbeddingVector>) -> Result<Self> {
        if let Some(v) = vectors.values().find(|v| v.dim() != dim) {
            return Err(RelevanceError::DimensionMismatch {
                expected: dim,
                got: v.dim(),
            });
        }
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io_err = |source| RelevanceError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| RelevanceError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: StoreLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            let v = EmbeddingVector::new(rec.vector).map_err(|e| malformed(e.to_string()))?;
            match dim {
                None => dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(malformed(format!("expected dimension {d}, got {}", v.dim())))
                }
                Some(_) => {}
            }
            vectors.insert(rec.key.to_ascii_lowercase(), v);
        }
        let dim = dim.ok_or_else(|| RelevanceError::Malformed {
            path: path.to_path_buf(),
            line: 0,
            message: "vector file is empty".into(),
        })?;
        Ok(Self { dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl RelevanceProvider for PrecomputedStore {
    fn kind(&self) -> ProviderKind {
        ProviderKind::PrecomputedStore
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        let key = sha256_hex(text);
        self.vectors
            .get(&key)
            .cloned()
            .ok_or(RelevanceError::MissingKey(key))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{endpoint}/embed`.
    pub endpoint: String,
    pub dim: usize,
    pub timeout: Duration,
    /// Retries after the first failed attempt.
    pub retries: usize,
    pub max_in_flight: usize,
    pub batch_size: usize,
    pub max_tokens: Option<usize>,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            dim,
            timeout: Duration::from_secs(30),
            retries: 3,
            max_in_flight: 4,
            batch_size: 32,
            max_tokens: Some(512),
        }
    }
}

/// Counting semaphore bounding concurrent HTTP requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock poisoned");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP embedding client. Responses are cached by the SHA-256 of the text, so
/// repeated lookups within a process are deterministic and free.
pub struct RemoteEmbedder {
    config: RemoteConfig,
    agent: ureq::Agent,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
    slots: Slots,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        let slots = Slots::new(config.max_in_flight);
        Self {
            config,
            agent,
            cache: Mutex::new(HashMap::new()),
            slots,
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock poisoned").len()
    }

    fn url(&self) -> String {
        format!("{}/embed", self.config.endpoint.trim_end_matches('/'))
    }

    fn request(&self, texts: &[&str]) -> std::result::Result<Vec<Vec<f64>>, String> {
        let _slot = self.slots.acquire();
        let mut resp = self
            .agent
            .post(&self.url())
            .send_json(EmbedRequest { texts })
            .map_err(|e| e.to_string())?;
        let body: EmbedResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(body.vectors)
    }

    fn fetch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
            }
            match self.request(texts) {
                Ok(raw) if raw.len() == texts.len() => {
                    return raw
                        .into_iter()
                        .map(|v| {
                            let v = EmbeddingVector::new(v)?;
                            if v.dim() != self.config.dim {
                                return Err(RelevanceError::DimensionMismatch {
                                    expected: self.config.dim,
                                    got: v.dim(),
                                });
                            }
                            Ok(v)
                        })
                        .collect();
                }
                Ok(raw) => {
                    last = format!("expected {} vectors, got {}", texts.len(), raw.len());
                }
                Err(e) => last = e,
            }
            log::debug!("embedding request attempt {} failed: {last}", attempt + 1);
        }
        Err(RelevanceError::Remote {
            attempts,
            message: last,
        })
    }
}

impl RelevanceProvider for RemoteEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::RemoteService
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_tokens(&self) -> Option<usize> {
        self.config.max_tokens
    }

    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_raw_batch(&[text])?.remove(0))
    }

    fn embed_raw_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let keys: Vec<String> = texts.iter().map(|t| sha256_hex(t)).collect();
        let mut missing: Vec<(&str, &str)> = {
            let cache = self.cache.lock().expect("cache lock poisoned");
            texts
                .iter()
                .zip(&keys)
                .filter(|(_, k)| !cache.contains_key(*k))
                .map(|(t, k)| (*t, k.as_str()))
                .collect()
        };
        missing.sort_unstable_by_key(|(_, k)| *k);
        missing.dedup_by_key(|(_, k)| *k);

        for chunk in missing.chunks(self.config.batch_size.max(1)) {
            let batch: Vec<&str> = chunk.iter().map(|(t, _)| *t).collect();
            let vectors = self.fetch(&batch)?;
            let mut cache = self.cache.lock().expect("cache lock poisoned");
            for ((_, key), v) in chunk.iter().zip(vectors) {
                cache.insert(key.to_string(), v);
            }
        }

        let cache = self.cache.lock().expect("cache lock poisoned");
        Ok(keys.iter().map(|k| cache[k].clone()).collect())
    }
}

/// Wraps a provider and counts embedding calls (one per text).
pub struct CountingProvider<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: RelevanceProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: RelevanceProvider> RelevanceProvider for CountingProvider<P> {
    fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn max_tokens(&self) -> Option<usize> {
        self.inner.max_tokens()
    }

    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed_raw(text)
    }

    fn embed_raw_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        self.calls.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed_raw_batch(texts)
    }
}
