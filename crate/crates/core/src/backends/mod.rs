//! Backend contracts for keyword extraction, image generation, embedding
//! and keyword refinement, plus the bundled English stop-word list.

use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::model::{Embedding, ImageRef, KeywordSet, Prompt};

pub mod latent_png;
pub mod sim;

pub use sim::{SimBackends, SimExtractor, SimGenerator, SimRefiner, SimScorer, SimWorld, SimWorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendErrorKind {
    Timeout,
    Protocol,
    ModelFailure,
    InvalidResponse,
    NoKeywordsExtracted,
    DimensionMismatch,
    BatchSizeMismatch,
    InvalidRequest,
}

impl fmt::Display for BackendErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}: {detail}")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub detail: String,
    pub retryable: bool,
}

impl BackendError {
    /// Timeouts and model failures are retryable, everything else is not.
    pub fn new(kind: BackendErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
            retryable: matches!(kind, BackendErrorKind::Timeout | BackendErrorKind::ModelFailure),
        }
    }

    pub fn with_retryable(mut self, retryable: bool) -> Self {
        self.retryable = retryable;
        self
    }

    pub fn invalid_request(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::InvalidRequest, detail)
    }

    pub fn invalid_response(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::InvalidResponse, detail)
    }

    pub fn no_keywords() -> Self {
        Self::new(BackendErrorKind::NoKeywordsExtracted, "no keywords extracted")
    }
}

/// One generation call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub negative_prompt: String,
    pub batch_size: usize,
    pub seed: u64,
    /// Loop iteration the batch belongs to; used to label the images.
    pub iteration: usize,
}

pub trait Extractor: Send + Sync {
    fn extract_keywords(&self, prompt: &Prompt) -> Result<KeywordSet, BackendError>;
}

pub trait Generator: Send + Sync {
    /// Returns exactly `request.batch_size` images in batch order.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<ImageRef>, BackendError>;
}

pub trait Scorer: Send + Sync {
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError>;
    fn embed_image(&self, images: &[ImageRef]) -> Result<Vec<Embedding>, BackendError>;
}

pub trait Refiner: Send + Sync {
    /// Proposes a more general replacement for `phrase`.
    fn refine_keyword(&self, phrase: &str, context: &Prompt) -> Result<String, BackendError>;
}

/// The four backends one run talks to.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub extractor: &'a dyn Extractor,
    pub generator: &'a dyn Generator,
    pub scorer: &'a dyn Scorer,
    pub refiner: &'a dyn Refiner,
}

/// Checks that a batch of embeddings has one row per input and a single dimension.
pub fn check_embedding_shape(
    embeddings: &[Embedding],
    expected_rows: usize,
) -> Result<(), BackendError> {
    if embeddings.len() != expected_rows {
        return Err(BackendError::invalid_response(format!(
            "expected {expected_rows} embeddings, got {}",
            embeddings.len()
        )));
    }
    if let Some(first) = embeddings.first() {
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != first.dim()) {
            return Err(BackendError::new(
                BackendErrorKind::DimensionMismatch,
                format!("ragged embeddings: dim {} and {}", first.dim(), bad.dim()),
            ));
        }
    }
    Ok(())
}

const STOP_WORDS_EN: &str = include_str!("../../data/stopwords_en.txt");

/// Parses a stop-word file: one lowercase token per line.
pub fn parse_stop_words(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn stop_words() -> &'static HashSet<String> {
    static WORDS: OnceLock<HashSet<String>> = OnceLock::new();
    WORDS.get_or_init(|| parse_stop_words(STOP_WORDS_EN))
}

pub fn is_stop_word(token: &str) -> bool {
    stop_words().contains(&token.to_lowercase())
}

/// Drops single-token keywords that are stop words; multi-word phrases are kept.
pub fn filter_stop_words(keywords: KeywordSet) -> KeywordSet {
    let mut out = KeywordSet::new();
    for kw in keywords.iter() {
        let single = kw.phrase.split_whitespace().count() == 1;
        if !(single && is_stop_word(&kw.phrase)) {
            out.insert(kw.clone());
        }
    }
    out
}

/// Word tokens split on whitespace and commas, with surrounding punctuation
/// stripped. Case is preserved; internal hyphens and apostrophes survive.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}
