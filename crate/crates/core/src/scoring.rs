//! Cosine similarity, batch aggregation, the threshold gate and the
//! keyword/sentence similarity report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Scorer};
use crate::model::{Aggregation, Embedding, KeywordSet, RunConfig, SimilarityScore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("embedding dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot take cosine of a zero vector")]
    ZeroVector,
    #[error("cannot aggregate an empty batch")]
    EmptyBatch,
    #[error("no keywords to evaluate")]
    NoKeywords,
    #[error("encoder returned {got} embeddings for {expected} texts")]
    EncoderCount { expected: usize, got: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<SimilarityScore, ScoringError> {
    if a.dim() != b.dim() {
        return Err(ScoringError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    let value = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(SimilarityScore::new(value).expect("clamped cosine is in range"))
}

pub fn aggregate(
    scores: &[SimilarityScore],
    mode: Aggregation,
) -> Result<SimilarityScore, ScoringError> {
    if scores.is_empty() {
        return Err(ScoringError::EmptyBatch);
    }
    let value = match mode {
        Aggregation::MaxOverBatch => scores
            .iter()
            .map(|s| s.value())
            .fold(f64::NEG_INFINITY, f64::max),
        Aggregation::MeanOverBatch => {
            scores.iter().map(|s| s.value()).sum::<f64>() / scores.len() as f64
        }
    };
    Ok(SimilarityScore::new(value.clamp(-1.0, 1.0)).expect("aggregate of valid scores"))
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match iter.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                let end = i + c.len_utf8();
                out.push(text[start..i].trim().to_string());
                start = end;
            }
        }
    }
    out.push(text[start..].trim().to_string());
    out.retain(|s| !s.is_empty());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordResult {
    pub phrase: String,
    #[serde(rename = "scores")]
    pub per_image_scores: Vec<SimilarityScore>,
    pub aggregated: SimilarityScore,
    pub passed: bool,
}

impl KeywordResult {
    /// Aggregates per-image scores and applies the threshold gate.
    pub fn from_scores(
        phrase: impl Into<String>,
        per_image_scores: Vec<SimilarityScore>,
        config: &RunConfig,
    ) -> Result<Self, ScoringError> {
        let aggregated = aggregate(&per_image_scores, config.aggregation)?;
        Ok(Self {
            phrase: phrase.into(),
            per_image_scores,
            aggregated,
            passed: config.passes(aggregated.value()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub sentence: String,
    pub aggregated: SimilarityScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub keyword_results: Vec<KeywordResult>,
    pub sentence_results: Vec<SentenceResult>,
    /// Similarity against the full description text.
    pub overall: SimilarityScore,
    pub all_passed: bool,
}

impl SimilarityReport {
    pub fn new(
        keyword_results: Vec<KeywordResult>,
        sentence_results: Vec<SentenceResult>,
        overall: SimilarityScore,
    ) -> Self {
        let all_passed = keyword_results.iter().all(|k| k.passed);
        Self {
            keyword_results,
            sentence_results,
            overall,
            all_passed,
        }
    }

    pub fn failing(&self) -> impl Iterator<Item = &KeywordResult> {
        self.keyword_results.iter().filter(|k| !k.passed)
    }

    /// Highest aggregated keyword score.
    pub fn max_keyword_score(&self) -> Option<SimilarityScore> {
        self.keyword_results
            .iter()
            .map(|k| k.aggregated)
            .max_by(|a, b| a.value().total_cmp(&b.value()))
    }
}

fn scores_against(
    images: &[Embedding],
    text: &Embedding,
) -> Result<Vec<SimilarityScore>, ScoringError> {
    images.iter().map(|img| cosine(img, text)).collect()
}

/// Builds a report from already-encoded text.
///
/// `text_embeddings` holds one row per keyword, then one per sentence, then
/// the full description, in that order.
pub fn evaluate_encoded(
    image_embeddings: &[Embedding],
    keywords: &KeywordSet,
    sentences: &[String],
    text_embeddings: &[Embedding],
    config: &RunConfig,
) -> Result<SimilarityReport, ScoringError> {
    if image_embeddings.is_empty() {
        return Err(ScoringError::EmptyBatch);
    }
    if keywords.is_empty() {
        return Err(ScoringError::NoKeywords);
    }
    let expected = keywords.len() + sentences.len() + 1;
    if text_embeddings.len() != expected {
        return Err(ScoringError::EncoderCount {
            expected,
            got: text_embeddings.len(),
        });
    }
    let dim = image_embeddings[0].dim();
    if let Some(e) = image_embeddings.iter().find(|e| e.dim() != dim) {
        return Err(ScoringError::DimensionMismatch {
            left: dim,
            right: e.dim(),
        });
    }

    let (kw_emb, rest) = text_embeddings.split_at(keywords.len());
    let (sent_emb, full_emb) = rest.split_at(sentences.len());

    let keyword_results = keywords
        .iter()
        .zip(kw_emb)
        .map(|(kw, emb)| {
            KeywordResult::from_scores(&kw.phrase, scores_against(image_embeddings, emb)?, config)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let sentence_results = sentences
        .iter()
        .zip(sent_emb)
        .map(|(s, emb)| {
            let scores = scores_against(image_embeddings, emb)?;
            Ok(SentenceResult {
                sentence: s.clone(),
                aggregated: aggregate(&scores, config.aggregation)?,
            })
        })
        .collect::<Result<Vec<_>, ScoringError>>()?;

    let overall = aggregate(
        &scores_against(image_embeddings, &full_emb[0])?,
        config.aggregation,
    )?;

    Ok(SimilarityReport::new(keyword_results, sentence_results, overall))
}

/// Texts that [`evaluate_encoded`] expects embeddings for, in order.
pub fn texts_to_encode(keywords: &KeywordSet, sentences: &[String], full_text: &str) -> Vec<String> {
    keywords
        .iter()
        .map(|k| k.phrase.clone())
        .chain(sentences.iter().cloned())
        .chain(std::iter::once(full_text.to_string()))
        .collect()
}

/// Encodes keyword phrases, sentences and the full text, scores them
/// against every image and gates the keywords. Sentences and the overall
/// score are informational.
pub fn evaluate(
    image_embeddings: &[Embedding],
    keywords: &KeywordSet,
    sentences: &[String],
    full_text: &str,
    text_encoder: &dyn Scorer,
    config: &RunConfig,
) -> Result<SimilarityReport, ScoringError> {
    if keywords.is_empty() {
        return Err(ScoringError::NoKeywords);
    }
    let texts = texts_to_encode(keywords, sentences, full_text);
    let text_embeddings = text_encoder.embed_text(&texts)?;
    evaluate_encoded(image_embeddings, keywords, sentences, &text_embeddings, config)
}
