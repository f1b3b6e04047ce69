//! PNG container for simulated latents.
//!
//! The latent is stored as JSON in a `tEXt` chunk; the pixels are a
//! grayscale strip of the latent values so the file is still a viewable
//! image.

use std::io::Cursor;

use crate::backends::BackendError;
use crate::model::Embedding;

pub const LATENT_CHUNK_KEY: &str = "promptloop-latent";
const STRIP_HEIGHT: u32 = 8;

pub fn encode(latent: &Embedding) -> Result<Vec<u8>, BackendError> {
    let width = latent.dim() as u32;
    let row: Vec<u8> = latent
        .values()
        .iter()
        .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    let pixels = row.repeat(STRIP_HEIGHT as usize);
    let json = serde_json::to_string(latent.values()).expect("finite floats serialize");

    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, STRIP_HEIGHT);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        encoder
            .add_text_chunk(LATENT_CHUNK_KEY.to_string(), json)
            .map_err(|e| BackendError::invalid_request(format!("png text chunk: {e}")))?;
        let mut writer = encoder
            .write_header()
            .map_err(|e| BackendError::invalid_request(format!("png header: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| BackendError::invalid_request(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Embedding, BackendError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let reader = decoder
        .read_info()
        .map_err(|e| BackendError::invalid_response(format!("not a PNG: {e}")))?;
    let chunk = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == LATENT_CHUNK_KEY)
        .ok_or_else(|| BackendError::invalid_response("PNG carries no simulated latent"))?;
    let values: Vec<f64> = serde_json::from_str(&chunk.text)
        .map_err(|e| BackendError::invalid_response(format!("latent chunk: {e}")))?;
    Embedding::new(values).map_err(|e| BackendError::invalid_response(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let e = Embedding::new(vec![0.1, -0.7071067811865476, 1.0 / 3.0, 0.0]).unwrap();
        let bytes = encode(&e).unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
        assert_eq!(decode(&bytes).unwrap(), e);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"nope").is_err());
    }
}
