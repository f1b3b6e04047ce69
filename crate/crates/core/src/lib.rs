//! Iterative prompt refinement for text-to-image generation.
//!
//! A scene description is split into keywords, composed into a weighted
//! prompt, rendered into a batch of images, and scored keyword by keyword
//! with cosine similarity over image and text embeddings. Keywords that do
//! not clear the threshold are re-weighted or generalized and the loop runs
//! again until every keyword passes or the iteration cap is hit.
//!
//! Backends are pluggable: [`backends::sim`] ships deterministic stand-ins
//! that live entirely in embedding space, and [`adapters`] talks to HTTP
//! services speaking the JSON protocol documented there.

pub mod adapters;
pub mod backends;
pub mod cli;
pub mod dsl;
pub mod fake_server;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod scoring;
pub mod trace;

pub use model::{
    default_config, validate_prompt, Aggregation, Embedding, ImagePayload, ImageRef,
    IterationRecord, Keyword, KeywordSet, Outcome, PolicyAction, PolicyKind, Prompt, RunConfig,
    RunTrace, SimilarityScore,
};
