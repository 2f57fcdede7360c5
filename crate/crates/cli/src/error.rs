use std::path::Path;

use qrt_core::bm25::Bm25Error;
use qrt_core::corpus::CorpusError;
use qrt_core::curation::CurationError;
use qrt_core::evalkit::EvalError;
use qrt_core::grpo::GrpoError;
use qrt_core::relevance::RelevanceError;
use thiserror::Error;

/// A failed command, classified by exit code.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Remote(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Remote(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Data(format!("{}: {e}", path.display()))
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<Bm25Error> for Failure {
    fn from(e: Bm25Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CurationError> for Failure {
    fn from(e: CurationError) -> Self {
        match e {
            CurationError::InvalidCap(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<RelevanceError> for Failure {
    fn from(e: RelevanceError) -> Self {
        match e {
            RelevanceError::Remote { .. } => Failure::Remote(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<GrpoError> for Failure {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Reward(inner) => inner.into(),
            GrpoError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}
