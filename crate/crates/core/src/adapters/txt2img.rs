//! txt2img-style generator client.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapters::{from_value, HttpClient};
use crate::backends::{BackendError, BackendErrorKind, GenerationRequest, Generator};
use crate::model::{ImagePayload, ImageRef};

pub const GENERATE_PATH: &str = "/v1/generate";
const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSettings {
    pub width: u32,
    pub height: u32,
    pub steps: u32,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            steps: 30,
        }
    }
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    images: Vec<String>,
}

/// Writes returned PNGs under `<image_dir>/iterNN/imgMM.png`.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: HttpClient,
    settings: GeneratorSettings,
    image_dir: PathBuf,
}

impl HttpGenerator {
    pub fn new(client: HttpClient, settings: GeneratorSettings, image_dir: impl Into<PathBuf>) -> Self {
        Self {
            client,
            settings,
            image_dir: image_dir.into(),
        }
    }

    pub fn request_body(&self, request: &GenerationRequest) -> serde_json::Value {
        json!({
            "prompt": request.prompt,
            "negative_prompt": request.negative_prompt,
            "batch_size": request.batch_size,
            "seed": request.seed,
            "width": self.settings.width,
            "height": self.settings.height,
            "steps": self.settings.steps,
        })
    }
}

fn decode_images(encoded: &[String]) -> Result<Vec<Vec<u8>>, BackendError> {
    encoded
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let bytes = B64
                .decode(s.trim())
                .map_err(|e| BackendError::invalid_response(format!("image {i}: bad base64: {e}")))?;
            if !bytes.starts_with(PNG_MAGIC) {
                return Err(BackendError::invalid_response(format!("image {i} is not a PNG")));
            }
            Ok(bytes)
        })
        .collect()
}

fn write_all(targets: &[(PathBuf, Vec<u8>)]) -> Result<(), BackendError> {
    let mut written: Vec<&Path> = Vec::new();
    let io_fail = |p: &Path, e: std::io::Error| {
        BackendError::invalid_request(format!("writing {}: {e}", p.display()))
    };
    for (path, bytes) in targets {
        let result = path
            .parent()
            .map_or(Ok(()), fs::create_dir_all)
            .and_then(|_| fs::write(path, bytes));
        if let Err(e) = result {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            let _ = fs::remove_file(path);
            return Err(io_fail(path, e));
        }
        written.push(path);
    }
    Ok(())
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<ImageRef>, BackendError> {
        if request.batch_size == 0 {
            return Err(BackendError::invalid_request("batch_size must be at least 1"));
        }
        let body = self.request_body(request);
        let resp: GenerateResponse = from_value(self.client.post_json(GENERATE_PATH, &body)?)?;
        if resp.images.len() != request.batch_size {
            return Err(BackendError::new(
                BackendErrorKind::BatchSizeMismatch,
                format!(
                    "requested {} images, received {}",
                    request.batch_size,
                    resp.images.len()
                ),
            ));
        }
        let decoded = decode_images(&resp.images)?;
        let refs: Vec<ImageRef> = (0..decoded.len())
            .map(|i| {
                let rel = crate::model::image_relative_path(request.iteration, i);
                ImageRef::new(request.iteration, i, ImagePayload::Path(self.image_dir.join(rel)))
            })
            .collect();
        let targets: Vec<(PathBuf, Vec<u8>)> = refs
            .iter()
            .zip(decoded)
            .map(|(r, bytes)| match &r.payload {
                ImagePayload::Path(p) => (p.clone(), bytes),
                _ => unreachable!("generator emits path payloads"),
            })
            .collect();
        write_all(&targets)?;
        Ok(refs)
    }
}
