//! Shared domain types: prompts, keywords, embeddings, image references,
//! run configuration and the iteration trace.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::SimilarityReport;

/// Floating tolerance applied when validating similarity values.
pub const SCORE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt contains a control character at byte {0}")]
    InvalidCharacters(usize),
    #[error("keyword phrase is empty")]
    EmptyPhrase,
    #[error("keyword weight {0} must be finite and positive")]
    InvalidWeight(f64),
    #[error("embedding must have at least one dimension")]
    EmptyEmbedding,
    #[error("embedding entry {index} is not finite")]
    NonFiniteEmbedding { index: usize },
    #[error("similarity value {0} is outside [-1, 1]")]
    ScoreOutOfRange(f64),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
}

/// A scene description handed to the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    text: String,
    #[serde(default)]
    negative_text: String,
}

impl Prompt {
    pub fn new(text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        check_control_chars(&text)?;
        Ok(Self {
            text,
            negative_text: String::new(),
        })
    }

    pub fn with_negative(mut self, negative: impl Into<String>) -> Result<Self, ModelError> {
        let negative = negative.into();
        check_control_chars(&negative)?;
        self.negative_text = negative;
        Ok(self)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn negative_text(&self) -> &str {
        &self.negative_text
    }
}

fn check_control_chars(text: &str) -> Result<(), ModelError> {
    match text.char_indices().find(|&(_, c)| c.is_control() && c != '\n') {
        Some((pos, _)) => Err(ModelError::InvalidCharacters(pos)),
        None => Ok(()),
    }
}

/// Validates raw user input into a [`Prompt`].
pub fn validate_prompt(text: &str) -> Result<Prompt, ModelError> {
    Prompt::new(text)
}

/// Case-folded form used for keyword identity.
pub fn fold(phrase: &str) -> String {
    phrase.trim().to_lowercase()
}

/// One extracted keyword and its attention weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub phrase: String,
    pub weight: f64,
}

impl Keyword {
    pub fn new(phrase: impl Into<String>, weight: f64) -> Result<Self, ModelError> {
        let phrase = phrase.into().trim().to_string();
        if phrase.is_empty() {
            return Err(ModelError::EmptyPhrase);
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(ModelError::InvalidWeight(weight));
        }
        Ok(Self { phrase, weight })
    }

    pub fn unweighted(phrase: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(phrase, 1.0)
    }

    pub fn key(&self) -> String {
        fold(&self.phrase)
    }
}

/// Ordered keyword list, deduplicated by case-folded phrase.
///
/// The first-inserted spelling of a phrase wins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordSet {
    keywords: Vec<Keyword>,
}

impl KeywordSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set from phrases at weight 1.0, dropping duplicates.
    pub fn from_phrases<I, S>(phrases: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = Self::new();
        for phrase in phrases {
            set.insert(Keyword::unweighted(phrase)?);
        }
        Ok(set)
    }

    /// Inserts `keyword` unless its case-folded phrase is already present.
    /// Returns whether the set grew.
    pub fn insert(&mut self, keyword: Keyword) -> bool {
        if self.position(&keyword.phrase).is_some() {
            return false;
        }
        self.keywords.push(keyword);
        true
    }

    pub fn position(&self, phrase: &str) -> Option<usize> {
        let key = fold(phrase);
        self.keywords.iter().position(|k| k.key() == key)
    }

    pub fn get(&self, phrase: &str) -> Option<&Keyword> {
        self.position(phrase).map(|i| &self.keywords[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Keyword> {
        self.keywords.iter()
    }

    pub fn as_slice(&self) -> &[Keyword] {
        &self.keywords
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn phrases(&self) -> Vec<String> {
        self.keywords.iter().map(|k| k.phrase.clone()).collect()
    }

    pub(crate) fn keywords_mut(&mut self) -> &mut Vec<Keyword> {
        &mut self.keywords
    }
}

impl<'a> IntoIterator for &'a KeywordSet {
    type Item = &'a Keyword;
    type IntoIter = std::slice::Iter<'a, Keyword>;

    fn into_iter(self) -> Self::IntoIter {
        self.keywords.iter()
    }
}

/// A fixed-dimension feature vector from an image or text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptyEmbedding);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteEmbedding { index });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = ModelError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

/// Where the pixels (or the simulated latent) of a generated image live.
#[derive(Debug, Clone, PartialEq)]
pub enum ImagePayload {
    Path(PathBuf),
    Bytes(Vec<u8>),
    /// Simulated generators emit a latent vector in place of pixels.
    Latent(Embedding),
}

/// One image of a generated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRef {
    pub id: String,
    pub iteration: usize,
    pub index_in_batch: usize,
    pub payload: ImagePayload,
}

impl ImageRef {
    pub fn new(iteration: usize, index_in_batch: usize, payload: ImagePayload) -> Self {
        Self {
            id: image_id(iteration, index_in_batch),
            iteration,
            index_in_batch,
            payload,
        }
    }

    /// Path of this image relative to a run's output directory.
    pub fn relative_path(&self) -> PathBuf {
        image_relative_path(self.iteration, self.index_in_batch)
    }
}

pub fn image_id(iteration: usize, index_in_batch: usize) -> String {
    format!("iter{iteration:02}-img{index_in_batch:02}")
}

pub fn image_relative_path(iteration: usize, index_in_batch: usize) -> PathBuf {
    PathBuf::from(format!("iter{iteration:02}")).join(format!("img{index_in_batch:02}.png"))
}

/// Cosine similarity value in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Result<Self, ModelError> {
        if !value.is_finite() || value.abs() > 1.0 + SCORE_EPSILON {
            return Err(ModelError::ScoreOutOfRange(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SimilarityScore {
    type Error = ModelError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        SimilarityScore::new(v)
    }
}

impl From<SimilarityScore> for f64 {
    fn from(s: SimilarityScore) -> Self {
        s.0
    }
}

impl fmt::Display for SimilarityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

/// How per-image scores are reduced to a keyword score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MaxOverBatch,
    MeanOverBatch,
}

/// Which refinement mechanisms the loop may use on failing keywords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    ReweightThenGeneralize,
    ReweightOnly,
    GeneralizeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub threshold: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub weight_step: f64,
    pub weight_cap: f64,
    pub reweight_attempts_before_generalize: u32,
    pub seed: u64,
    pub aggregation: Aggregation,
    /// Pass requires `score > threshold` when set, `score >= threshold` otherwise.
    pub strict_threshold: bool,
    pub policy: PolicyKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            batch_size: 16,
            max_iterations: 8,
            weight_step: 1.1,
            weight_cap: 1.5,
            reweight_attempts_before_generalize: 2,
            seed: 0,
            aggregation: Aggregation::MaxOverBatch,
            strict_threshold: true,
            policy: PolicyKind::ReweightThenGeneralize,
        }
    }
}

pub fn default_config() -> RunConfig {
    RunConfig::default()
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if !(self.weight_step.is_finite() && self.weight_step > 1.0) {
            return bad(format!("weight_step {} must be > 1", self.weight_step));
        }
        if !(self.weight_cap.is_finite() && self.weight_cap >= self.weight_step) {
            return bad(format!(
                "weight_cap {} must be >= weight_step {}",
                self.weight_cap, self.weight_step
            ));
        }
        Ok(())
    }

    /// Threshold gate applied to aggregated keyword scores.
    pub fn passes(&self, score: f64) -> bool {
        if self.strict_threshold {
            score > self.threshold
        } else {
            score >= self.threshold
        }
    }

    /// Generation seed for a given iteration.
    pub fn iteration_seed(&self, iteration: usize) -> u64 {
        self.seed ^ iteration as u64
    }
}

/// Refinement applied after an iteration's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyAction {
    None,
    Reweight {
        phrases: Vec<String>,
    },
    /// At least one phrase was replaced. Reweights made in the same step
    /// are listed alongside.
    Generalize {
        replacements: Vec<Replacement>,
        #[serde(default)]
        reweighted: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub seed: u64,
    pub rendered_prompt: String,
    pub keywords: KeywordSet,
    pub image_refs: Vec<ImageRef>,
    pub report: SimilarityReport,
    pub policy_action: PolicyAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Converged,
    IterationCapReached,
}

impl Outcome {
    pub fn short_name(self) -> &'static str {
        match self {
            Outcome::Converged => "Converged",
            Outcome::IterationCapReached => "Cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub config: RunConfig,
    pub initial_prompt: Prompt,
    pub records: Vec<IterationRecord>,
    pub outcome: Outcome,
    pub final_max_similarity: SimilarityScore,
}

impl RunTrace {
    pub fn last_record(&self) -> &IterationRecord {
        self.records.last().expect("run trace has at least one record")
    }
}
