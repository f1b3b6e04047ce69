//! Embedding client for `/v1/embed/text` and `/v1/embed/image`.

use std::fs;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use crate::adapters::{from_value, HttpClient};
use crate::backends::{
    check_embedding_shape, latent_png, BackendError, BackendErrorKind, Scorer,
};
use crate::model::{Embedding, ImagePayload, ImageRef};

pub const EMBED_TEXT_PATH: &str = "/v1/embed/text";
pub const EMBED_IMAGE_PATH: &str = "/v1/embed/image";

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

fn validate(resp: EmbedResponse, expected_rows: usize) -> Result<Vec<Embedding>, BackendError> {
    if let Some((i, row)) = resp.embeddings.iter().enumerate().find(|(_, r)| r.len() != resp.dim) {
        return Err(BackendError::new(
            BackendErrorKind::DimensionMismatch,
            format!("row {i} has {} values, response dim is {}", row.len(), resp.dim),
        ));
    }
    let rows = resp
        .embeddings
        .into_iter()
        .map(|r| Embedding::new(r).map_err(|e| BackendError::invalid_response(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    check_embedding_shape(&rows, expected_rows)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct HttpScorer {
    client: HttpClient,
    parallelism: usize,
}

impl HttpScorer {
    pub fn new(client: HttpClient) -> Self {
        Self {
            client,
            parallelism: 4,
        }
    }

    /// Caps how many image-embedding requests are in flight at once.
    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    fn embed_image_chunk(&self, encoded: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let resp = self
            .client
            .post_json(EMBED_IMAGE_PATH, &json!({ "images": encoded }))?;
        validate(from_value(resp)?, encoded.len())
    }
}

fn image_bytes(image: &ImageRef) -> Result<Vec<u8>, BackendError> {
    match &image.payload {
        ImagePayload::Bytes(b) => Ok(b.clone()),
        ImagePayload::Path(p) => fs::read(p)
            .map_err(|e| BackendError::invalid_request(format!("{}: {e}", p.display()))),
        ImagePayload::Latent(l) => latent_png::encode(l),
    }
}

impl Scorer for HttpScorer {
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::invalid_request("no texts to embed"));
        }
        let resp = self
            .client
            .post_json(EMBED_TEXT_PATH, &json!({ "texts": texts }))?;
        validate(from_value(resp)?, texts.len())
    }

    fn embed_image(&self, images: &[ImageRef]) -> Result<Vec<Embedding>, BackendError> {
        if images.is_empty() {
            return Err(BackendError::invalid_request("no images to embed"));
        }
        let encoded = images
            .iter()
            .map(|img| image_bytes(img).map(|b| B64.encode(b)))
            .collect::<Result<Vec<_>, _>>()?;
        let chunk = encoded.len().div_ceil(self.parallelism);
        let parts: Vec<Result<Vec<Embedding>, BackendError>> = std::thread::scope(|s| {
            let handles: Vec<_> = encoded
                .chunks(chunk)
                .map(|c| s.spawn(move || self.embed_image_chunk(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("embedding worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(images.len());
        for part in parts {
            out.extend(part?);
        }
        check_embedding_shape(&out, images.len())?;
        Ok(out)
    }
}
