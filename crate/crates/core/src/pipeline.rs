//! The generate, score, gate, refine loop.

use std::collections::HashMap;

use thiserror::Error;

use crate::backends::{BackendError, Backends, GenerationRequest, Refiner};
use crate::dsl::{compose_prompt, quantize_weight};
use crate::model::{
    fold, Embedding, IterationRecord, Keyword, KeywordSet, ModelError, Outcome, PolicyAction,
    PolicyKind, Prompt, Replacement, RunConfig, RunTrace,
};
use crate::scoring::{
    evaluate_encoded, split_sentences, texts_to_encode, ScoringError, SimilarityReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(#[from] ModelError),
    #[error("no keywords extracted from the prompt")]
    NoKeywordsExtracted,
    #[error("backend failure{}: {source}", iteration_suffix(*.iteration))]
    Backend {
        iteration: Option<usize>,
        source: BackendError,
    },
    #[error("scoring failed at iteration {iteration}: {source}")]
    Scoring {
        iteration: usize,
        source: ScoringError,
    },
    #[error("refine_step called with no failing keywords")]
    NothingToRefine,
    #[error("refiner made no progress on {phrase:?} and its weight is at the cap")]
    RefinerNoProgress { phrase: String },
    #[error("generator returned {got} images, expected {expected}")]
    BatchSizeMismatch { expected: usize, got: usize },
}

fn iteration_suffix(iteration: Option<usize>) -> String {
    iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default()
}

impl PipelineError {
    fn backend(iteration: Option<usize>, source: BackendError) -> Self {
        PipelineError::Backend { iteration, source }
    }
}

/// Chooses between re-weighting and generalizing failing keywords.
///
/// Tracks how many times each keyword has been re-weighted since it last
/// changed phrase.
#[derive(Debug, Clone, Default)]
pub struct RefinementPolicy {
    pub kind: PolicyKind,
    reweight_attempts: HashMap<String, u32>,
}

impl RefinementPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            reweight_attempts: HashMap::new(),
        }
    }

    pub fn attempts(&self, phrase: &str) -> u32 {
        self.reweight_attempts.get(&fold(phrase)).copied().unwrap_or(0)
    }
}

fn boosted(weight: f64, config: &RunConfig) -> Option<f64> {
    let next = quantize_weight(weight * config.weight_step);
    (next <= config.weight_cap).then_some(next)
}

/// Applies one refinement to every failing keyword of `report`.
///
/// Passing keywords are carried over untouched. A generalized phrase that
/// collides with an existing keyword is merged into it.
pub fn refine_step(
    keywords: &KeywordSet,
    report: &SimilarityReport,
    policy: &mut RefinementPolicy,
    refiner: &dyn Refiner,
    context: &Prompt,
    config: &RunConfig,
) -> Result<(KeywordSet, PolicyAction), PipelineError> {
    let failing: Vec<String> = report.failing().map(|r| fold(&r.phrase)).collect();
    if failing.is_empty() {
        return Err(PipelineError::NothingToRefine);
    }

    let mut reweighted = Vec::new();
    let mut replacements = Vec::new();
    let mut next: Vec<Keyword> = Vec::with_capacity(keywords.len());

    for kw in keywords.iter() {
        if !failing.contains(&kw.key()) {
            next.push(kw.clone());
            continue;
        }
        let attempts = policy.attempts(&kw.phrase);
        let boost = boosted(kw.weight, config);
        let prefer_reweight = match policy.kind {
            PolicyKind::ReweightOnly => true,
            PolicyKind::GeneralizeOnly => false,
            PolicyKind::ReweightThenGeneralize => {
                boost.is_some() && attempts < config.reweight_attempts_before_generalize
            }
        };

        if prefer_reweight {
            if let Some(w) = boost {
                policy.reweight_attempts.insert(kw.key(), attempts + 1);
                reweighted.push(kw.phrase.clone());
                next.push(Keyword {
                    phrase: kw.phrase.clone(),
                    weight: w,
                });
            } else {
                // ReweightOnly at the cap: nothing left to try for this keyword.
                next.push(kw.clone());
            }
            continue;
        }

        let replacement = refiner
            .refine_keyword(&kw.phrase, context)
            .map_err(|e| PipelineError::backend(None, e))?;
        let replacement = replacement.trim();
        if replacement.is_empty() || fold(replacement) == kw.key() {
            match (policy.kind, boost) {
                (PolicyKind::ReweightThenGeneralize, Some(w)) => {
                    policy.reweight_attempts.insert(kw.key(), attempts + 1);
                    reweighted.push(kw.phrase.clone());
                    next.push(Keyword {
                        phrase: kw.phrase.clone(),
                        weight: w,
                    });
                    continue;
                }
                _ => {
                    return Err(PipelineError::RefinerNoProgress {
                        phrase: kw.phrase.clone(),
                    })
                }
            }
        }
        policy.reweight_attempts.remove(&kw.key());
        policy.reweight_attempts.remove(&fold(replacement));
        replacements.push(Replacement {
            from: kw.phrase.clone(),
            to: replacement.to_string(),
        });
        next.push(Keyword::unweighted(replacement).expect("non-empty replacement"));
    }

    let mut out = KeywordSet::new();
    for kw in next {
        match out.position(&kw.phrase) {
            Some(i) => {
                let existing = &mut out.keywords_mut()[i];
                existing.weight = existing.weight.max(kw.weight);
            }
            None => {
                out.insert(kw);
            }
        }
    }
    let action = if !replacements.is_empty() {
        PolicyAction::Generalize {
            replacements,
            reweighted,
        }
    } else if !reweighted.is_empty() {
        PolicyAction::Reweight { phrases: reweighted }
    } else {
        PolicyAction::None
    };
    Ok((out, action))
}

/// Runs the refinement loop to convergence or the iteration cap.
pub fn run(
    prompt: &Prompt,
    config: &RunConfig,
    backends: Backends<'_>,
) -> Result<RunTrace, PipelineError> {
    config.validate()?;

    let mut keywords = backends
        .extractor
        .extract_keywords(prompt)
        .map_err(|e| match e.kind {
            crate::backends::BackendErrorKind::NoKeywordsExtracted => {
                PipelineError::NoKeywordsExtracted
            }
            _ => PipelineError::backend(None, e),
        })?;
    if keywords.is_empty() {
        return Err(PipelineError::NoKeywordsExtracted);
    }

    let sentences = split_sentences(prompt.text());
    let mut policy = RefinementPolicy::new(config.policy);
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut outcome = Outcome::IterationCapReached;

    for iteration in 0..config.max_iterations {
        let rendered_prompt = compose_prompt(&keywords);
        let seed = config.iteration_seed(iteration);
        let request = GenerationRequest {
            prompt: rendered_prompt.clone(),
            negative_prompt: prompt.negative_text().to_string(),
            batch_size: config.batch_size,
            seed,
            iteration,
        };
        let image_refs = backends
            .generator
            .generate(&request)
            .map_err(|e| PipelineError::backend(Some(iteration), e))?;
        if image_refs.len() != config.batch_size {
            return Err(PipelineError::BatchSizeMismatch {
                expected: config.batch_size,
                got: image_refs.len(),
            });
        }

        let texts = texts_to_encode(&keywords, &sentences, prompt.text());
        let (image_embeddings, text_embeddings) = embed_concurrently(backends, &image_refs, &texts)
            .map_err(|e| PipelineError::backend(Some(iteration), e))?;

        let report = evaluate_encoded(
            &image_embeddings,
            &keywords,
            &sentences,
            &text_embeddings,
            config,
        )
        .map_err(|source| PipelineError::Scoring { iteration, source })?;

        let converged = report.all_passed;
        let last = iteration + 1 == config.max_iterations;
        let (next_keywords, policy_action) = if converged || last {
            (None, PolicyAction::None)
        } else {
            let (k, a) = refine_step(
                &keywords,
                &report,
                &mut policy,
                backends.refiner,
                prompt,
                config,
            )
            .map_err(|e| match e {
                PipelineError::Backend { source, .. } => {
                    PipelineError::backend(Some(iteration), source)
                }
                other => other,
            })?;
            (Some(k), a)
        };

        records.push(IterationRecord {
            iteration,
            seed,
            rendered_prompt,
            keywords: keywords.clone(),
            image_refs,
            report,
            policy_action,
        });

        if converged {
            outcome = Outcome::Converged;
            break;
        }
        if let Some(k) = next_keywords {
            keywords = k;
        }
    }

    let final_max_similarity = records
        .last()
        .and_then(|r| r.report.max_keyword_score())
        .expect("at least one iteration with keywords ran");

    Ok(RunTrace {
        config: config.clone(),
        initial_prompt: prompt.clone(),
        records,
        outcome,
        final_max_similarity,
    })
}

type Embedded = (Vec<Embedding>, Vec<Embedding>);

fn embed_concurrently(
    backends: Backends<'_>,
    images: &[crate::model::ImageRef],
    texts: &[String],
) -> Result<Embedded, BackendError> {
    std::thread::scope(|s| {
        let image_job = s.spawn(|| backends.scorer.embed_image(images));
        let text_result = backends.scorer.embed_text(texts);
        let image_result = image_job.join().expect("image embedding thread panicked");
        Ok((image_result?, text_result?))
    })
}
