//! Deterministic simulated backends.
//!
//! Every word token gets its own orthonormal basis direction, so similarity
//! is predictable in closed form. A phrase's direction is the normalized sum
//! of its non-stop-word token directions. Basis index 0 is reserved for a
//! blank canvas, the latent of an image in which every concept was dropped.
//!
//! The generator parses the weighted prompt, recovers each comma-separated
//! concept with its effective weight `w`, and emits per image
//! `normalize(sum_k c_k * d_k + noise)` where `c_k = w_k` when
//! `w_k >= inclusion_threshold` and otherwise `w_k` with probability
//! `keep_probability`, `0` else. The draw is keyed on (seed, concept, image).
//! With no noise and everything included, the cosine between an image and
//! concept `k` is `w_k / |w|`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backends::{
    check_embedding_shape, is_stop_word, latent_png, word_tokens, BackendError, BackendErrorKind,
    Backends, Extractor, GenerationRequest, Generator, Refiner, Scorer,
};
use crate::dsl;
use crate::model::{fold, Embedding, ImagePayload, ImageRef, Keyword, KeywordSet, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimWorldConfig {
    pub dim: usize,
    pub seed: u64,
    pub inclusion_threshold: f64,
    pub noise_sigma: f64,
    /// Chance that a concept below the inclusion threshold still appears.
    pub keep_probability: f64,
    /// Tokens the generator can never draw.
    pub excluded_tokens: BTreeSet<String>,
}

impl Default for SimWorldConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0,
            inclusion_threshold: 1.05,
            noise_sigma: 0.0,
            keep_probability: 0.5,
            excluded_tokens: BTreeSet::new(),
        }
    }
}

/// Shared latent space of the simulated backends.
#[derive(Debug)]
pub struct SimWorld {
    config: SimWorldConfig,
    vocabulary: Mutex<IndexMap<String, usize>>,
}

/// Snapshot of a world's token assignment, enough to re-score stored latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorldState {
    pub config: SimWorldConfig,
    pub vocabulary: Vec<String>,
}

impl SimWorld {
    pub fn new(config: SimWorldConfig) -> Result<Self, BackendError> {
        if config.dim < 2 {
            return Err(BackendError::invalid_request("sim dim must be at least 2"));
        }
        if !(0.0..=1.0).contains(&config.keep_probability) {
            return Err(BackendError::invalid_request("keep_probability must lie in [0, 1]"));
        }
        if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
            return Err(BackendError::invalid_request("noise_sigma must be >= 0"));
        }
        let config = SimWorldConfig {
            excluded_tokens: config.excluded_tokens.iter().map(|t| fold(t)).collect(),
            ..config
        };
        Ok(Self {
            config,
            vocabulary: Mutex::new(IndexMap::new()),
        })
    }

    pub fn from_state(state: SimWorldState) -> Result<Self, BackendError> {
        let world = Self::new(state.config)?;
        for token in &state.vocabulary {
            world.token_index(token)?;
        }
        Ok(world)
    }

    pub fn state(&self) -> SimWorldState {
        SimWorldState {
            config: self.config.clone(),
            vocabulary: self.vocabulary.lock().unwrap().keys().cloned().collect(),
        }
    }

    pub fn config(&self) -> &SimWorldConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Basis index of a (case-folded) token, assigned in first-seen order.
    pub fn token_index(&self, token: &str) -> Result<usize, BackendError> {
        let key = fold(token);
        let mut vocab = self.vocabulary.lock().unwrap();
        if let Some(&i) = vocab.get(&key) {
            return Ok(i);
        }
        let next = vocab.len() + 1;
        if next >= self.config.dim {
            return Err(BackendError::invalid_request(format!(
                "sim vocabulary exhausted: {:?} would need basis index {next} but dim is {}",
                key, self.config.dim
            )));
        }
        vocab.insert(key, next);
        Ok(next)
    }

    fn content_tokens(text: &str) -> Vec<String> {
        let tokens: Vec<String> = word_tokens(text)
            .into_iter()
            .map(|t| t.to_lowercase())
            .filter(|t| !is_stop_word(t))
            .collect();
        if tokens.is_empty() && !text.trim().is_empty() {
            vec![fold(text)]
        } else {
            tokens
        }
    }

    /// Unit direction of a text: normalized sum of its token directions.
    pub fn direction(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let tokens = Self::content_tokens(text);
        if tokens.is_empty() {
            return Err(BackendError::invalid_request("cannot embed empty text"));
        }
        let mut v = vec![0.0; self.config.dim];
        for t in &tokens {
            v[self.token_index(t)?] += 1.0;
        }
        normalize_in_place(&mut v);
        Ok(v)
    }

    fn is_excluded(&self, concept: &str) -> bool {
        !self.config.excluded_tokens.is_empty()
            && Self::content_tokens(concept)
                .iter()
                .any(|t| self.config.excluded_tokens.contains(t))
    }

    fn latent(
        &self,
        concepts: &[(String, f64, Vec<f64>)],
        seed: u64,
        image: usize,
    ) -> Embedding {
        let mut v = vec![0.0; self.config.dim];
        for (concept, weight, dir) in concepts {
            if self.is_excluded(concept) {
                continue;
            }
            let included = *weight >= self.config.inclusion_threshold
                || unit_draw(&[self.config.seed, seed, fnv1a(&fold(concept)), image as u64])
                    < self.config.keep_probability;
            if included {
                for (acc, d) in v.iter_mut().zip(dir) {
                    *acc += weight * d;
                }
            }
        }
        if self.config.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.config.seed, seed, image as u64, 0x6e6f697365]));
            let normal = Normal::new(0.0, self.config.noise_sigma).expect("sigma validated");
            for x in v.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        normalize_in_place(&mut v);
        Embedding::new(v).expect("finite latent")
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f6a8885a308d3, |h, &p| splitmix(h ^ p))
}

fn unit_draw(parts: &[u64]) -> f64 {
    (mix(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Splits the prompt into comma/whitespace tokens and drops stop words.
#[derive(Debug, Clone, Default)]
pub struct SimExtractor;

impl Extractor for SimExtractor {
    fn extract_keywords(&self, prompt: &Prompt) -> Result<KeywordSet, BackendError> {
        let mut set = KeywordSet::new();
        for token in word_tokens(prompt.text()) {
            if !is_stop_word(&token) {
                set.insert(Keyword::unweighted(token).expect("token is non-empty"));
            }
        }
        if set.is_empty() {
            return Err(BackendError::no_keywords());
        }
        Ok(set)
    }
}

#[derive(Debug, Clone)]
pub struct SimGenerator {
    world: Arc<SimWorld>,
}

impl SimGenerator {
    pub fn new(world: Arc<SimWorld>) -> Self {
        Self { world }
    }
}

impl Generator for SimGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<ImageRef>, BackendError> {
        if request.batch_size == 0 {
            return Err(BackendError::invalid_request("batch_size must be at least 1"));
        }
        let ast = dsl::parse(&request.prompt)
            .map_err(|e| BackendError::invalid_request(format!("prompt: {e}")))?;
        let concepts = ast
            .phrase_weights()
            .into_iter()
            .map(|(phrase, w)| {
                let dir = self.world.direction(&phrase)?;
                Ok((phrase, w, dir))
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        Ok((0..request.batch_size)
            .map(|b| {
                let latent = self.world.latent(&concepts, request.seed, b);
                ImageRef::new(request.iteration, b, ImagePayload::Latent(latent))
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct SimScorer {
    world: Arc<SimWorld>,
}

impl SimScorer {
    pub fn new(world: Arc<SimWorld>) -> Self {
        Self { world }
    }
}

impl Scorer for SimScorer {
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::invalid_request("no texts to embed"));
        }
        texts
            .iter()
            .map(|t| {
                let v = self.world.direction(t)?;
                Ok(Embedding::new(v).expect("finite direction"))
            })
            .collect()
    }

    fn embed_image(&self, images: &[ImageRef]) -> Result<Vec<Embedding>, BackendError> {
        if images.is_empty() {
            return Err(BackendError::invalid_request("no images to embed"));
        }
        let out = images
            .iter()
            .map(|img| match &img.payload {
                ImagePayload::Latent(e) => Ok(e.clone()),
                ImagePayload::Bytes(b) => latent_png::decode(b),
                ImagePayload::Path(p) => {
                    let bytes = fs::read(p).map_err(|e| {
                        BackendError::invalid_request(format!("{}: {e}", p.display()))
                    })?;
                    latent_png::decode(&bytes)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        check_embedding_shape(&out, images.len())?;
        if out[0].dim() != self.world.dim() {
            return Err(BackendError::new(
                BackendErrorKind::DimensionMismatch,
                format!("latent dim {} but world dim {}", out[0].dim(), self.world.dim()),
            ));
        }
        Ok(out)
    }
}

const DEFAULT_OVERRIDES: &str = include_str!("../../data/refiner_overrides.tsv");

/// Generalizes a phrase by stripping leading modifiers.
///
/// Lookup order: the override table, then the last comma segment cut to its
/// last two tokens, and when that changes nothing, the final token alone.
#[derive(Debug, Clone)]
pub struct SimRefiner {
    overrides: HashMap<String, String>,
}

impl Default for SimRefiner {
    fn default() -> Self {
        Self::with_overrides(DEFAULT_OVERRIDES).expect("bundled override table parses")
    }
}

impl SimRefiner {
    /// Parses a two-column `phrase<TAB>replacement` table. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn with_overrides(tsv: &str) -> Result<Self, BackendError> {
        let mut overrides = HashMap::new();
        for (n, line) in tsv.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [from, to] if !from.trim().is_empty() && !to.trim().is_empty() => {
                    overrides.insert(fold(from), to.trim().to_string());
                }
                _ => {
                    return Err(BackendError::invalid_request(format!(
                        "override table line {}: expected two tab-separated columns",
                        n + 1
                    )))
                }
            }
        }
        Ok(Self { overrides })
    }

    pub fn generalize(&self, phrase: &str) -> String {
        let phrase = phrase.trim();
        if let Some(r) = self.overrides.get(&fold(phrase)) {
            return r.clone();
        }
        let segment = phrase.rsplit(',').next().unwrap_or(phrase).trim();
        let tokens: Vec<&str> = segment.split_whitespace().collect();
        let tail = tokens[tokens.len().saturating_sub(2)..].join(" ");
        if fold(&tail) != fold(phrase) || tokens.len() < 2 {
            tail
        } else {
            tokens[tokens.len() - 1].to_string()
        }
    }
}

impl Refiner for SimRefiner {
    fn refine_keyword(&self, phrase: &str, _context: &Prompt) -> Result<String, BackendError> {
        if phrase.trim().is_empty() {
            return Err(BackendError::invalid_request("empty phrase"));
        }
        Ok(self.generalize(phrase))
    }
}

/// A full set of simulated backends sharing one world.
#[derive(Debug, Clone)]
pub struct SimBackends {
    pub world: Arc<SimWorld>,
    pub extractor: SimExtractor,
    pub generator: SimGenerator,
    pub scorer: SimScorer,
    pub refiner: SimRefiner,
}

impl SimBackends {
    pub fn new(config: SimWorldConfig) -> Result<Self, BackendError> {
        Ok(Self::from_world(Arc::new(SimWorld::new(config)?)))
    }

    pub fn from_world(world: Arc<SimWorld>) -> Self {
        Self {
            extractor: SimExtractor,
            generator: SimGenerator::new(world.clone()),
            scorer: SimScorer::new(world.clone()),
            refiner: SimRefiner::default(),
            world,
        }
    }

    pub fn backends(&self) -> Backends<'_> {
        Backends {
            extractor: &self.extractor,
            generator: &self.generator,
            scorer: &self.scorer,
            refiner: &self.refiner,
        }
    }
}
