//! Keyword extraction and generalization through a chat-style `/v1/extract`
//! endpoint.
//!
//! Both requests send a filled-in instruction template as `prompt`. The
//! returned `keywords` strings are treated as raw completion text, so a
//! service may answer with one comma-separated line or with a pre-split list.

use serde::Deserialize;
use serde_json::json;

use crate::adapters::{from_value, HttpClient};
use crate::backends::{filter_stop_words, BackendError, Extractor, Refiner};
use crate::model::{fold, Keyword, KeywordSet, Prompt};

pub const EXTRACT_TEMPLATE: &str = include_str!("../../data/extract_keywords_v1.txt");
pub const GENERALIZE_TEMPLATE: &str = include_str!("../../data/generalize_keyword_v1.txt");
pub const EXTRACT_PATH: &str = "/v1/extract";

#[derive(Debug, Deserialize)]
struct ExtractResponse {
    keywords: Vec<String>,
}

fn trim_completion_piece(s: &str) -> &str {
    let s = s.trim();
    // list markers: "1.", "2)", "-", "*", bullet
    let s = match s.find(|c: char| !c.is_ascii_digit()) {
        Some(i) if i > 0 && s[i..].starts_with(['.', ')']) => &s[i + 1..],
        _ => s.trim_start_matches(['-', '*', '\u{2022}']),
    };
    s.trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`'))
        .trim_end_matches(['.', ';'])
        .trim()
}

/// Splits a completion on commas and newlines, dropping list markers and
/// `Header:` lines, into a deduplicated,
/// stop-word-filtered keyword set.
pub fn parse_keyword_completion(completion: &str) -> Result<KeywordSet, BackendError> {
    let mut set = KeywordSet::new();
    let lines = completion.lines().filter(|l| !l.trim_end().ends_with(':'));
    for piece in lines.flat_map(|l| l.split(',')) {
        let piece = trim_completion_piece(piece);
        if !piece.is_empty() {
            set.insert(Keyword::unweighted(piece).expect("non-empty piece"));
        }
    }
    let set = filter_stop_words(set);
    if set.is_empty() {
        return Err(BackendError::no_keywords());
    }
    Ok(set)
}

/// Takes the first non-empty line, strips quotes and punctuation, and
/// rejects answers that are empty or repeat the original phrase.
pub fn parse_generalization(completion: &str, original: &str) -> Result<String, BackendError> {
    let line = completion
        .lines()
        .map(|l| {
            l.trim()
                .trim_matches(|c: char| c.is_ascii_punctuation() && c != '-' && c != '(' && c != ')')
                .trim()
        })
        .find(|l| !l.is_empty())
        .unwrap_or("");
    if line.is_empty() {
        return Err(BackendError::invalid_response("empty generalization"));
    }
    if fold(line) == fold(original) {
        return Err(BackendError::invalid_response(format!(
            "generalization of {original:?} returned the same phrase"
        )));
    }
    Ok(line.to_string())
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    pairs
        .iter()
        .fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

#[derive(Debug, Clone)]
pub struct ChatExtractor {
    client: HttpClient,
}

impl ChatExtractor {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }

    pub fn instruction(prompt: &Prompt) -> String {
        fill(EXTRACT_TEMPLATE, &[("description", prompt.text())])
    }
}

impl Extractor for ChatExtractor {
    fn extract_keywords(&self, prompt: &Prompt) -> Result<KeywordSet, BackendError> {
        let body = json!({ "prompt": Self::instruction(prompt) });
        let resp: ExtractResponse = from_value(self.client.post_json(EXTRACT_PATH, &body)?)?;
        parse_keyword_completion(&resp.keywords.join("\n"))
    }
}

#[derive(Debug, Clone)]
pub struct ChatRefiner {
    client: HttpClient,
}

impl ChatRefiner {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }

    pub fn instruction(phrase: &str, context: &Prompt) -> String {
        fill(
            GENERALIZE_TEMPLATE,
            &[("keyword", phrase), ("description", context.text())],
        )
    }
}

impl Refiner for ChatRefiner {
    fn refine_keyword(&self, phrase: &str, context: &Prompt) -> Result<String, BackendError> {
        if phrase.trim().is_empty() {
            return Err(BackendError::invalid_request("empty phrase"));
        }
        let body = json!({ "prompt": Self::instruction(phrase, context) });
        let resp: ExtractResponse = from_value(self.client.post_json(EXTRACT_PATH, &body)?)?;
        parse_generalization(&resp.keywords.join("\n"), phrase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackendErrorKind;

    #[test]
    fn keyword_completions() {
        let set = parse_keyword_completion(
            "Cyberpunk cityscape, Neon-lit skyscrapers, Crowded streets",
        )
        .unwrap();
        assert_eq!(set.len(), 3);
        let set = parse_keyword_completion(
            "Fairy-tale realm, Mountain, Snow, Waterfalls, Streams, Valleys, Castle, Enchantment, Wonder",
        )
        .unwrap();
        assert_eq!(set.len(), 9);
        assert_eq!(set.as_slice()[8].phrase, "Wonder");
        let err = parse_keyword_completion("").unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::NoKeywordsExtracted);
    }

    #[test]
    fn city_keywords() {
        let completion = "Cyberpunk cityscape, Neon-lit skyscrapers, Crowded streets, \
            Multilingual neon signs, Colorful glow, Eclectic pedestrians, Street vendors, Cars, \
            Futuristic digital billboard, Advertisements.";
        let set = parse_keyword_completion(completion).unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(set.as_slice()[0].phrase, "Cyberpunk cityscape");
        assert_eq!(set.as_slice()[9].phrase, "Advertisements");
    }

    #[test]
    fn completion_cleanup() {
        let set = parse_keyword_completion("castle\n\n, the, castle ,\"snow\"").unwrap();
        assert_eq!(set.phrases(), vec!["castle", "snow"]);
        assert!(parse_keyword_completion("the, of ,a").is_err());
    }

    #[test]
    fn list_completions() {
        let set = parse_keyword_completion("Keywords:\n1. Cozy cabin\n2) Snow\n- Fox\n* cozy cabin\n3D render").unwrap();
        assert_eq!(set.phrases(), vec!["Cozy cabin", "Snow", "Fox", "3D render"]);
    }

    #[test]
    fn generalization_parsing() {
        assert_eq!(parse_generalization("cabin\n", "Cozy, rustic cabin").unwrap(), "cabin");
        assert_eq!(parse_generalization("\"castle\"", "old castle").unwrap(), "castle");
        assert_eq!(parse_generalization("\n  vehicles.\nextra", "cars").unwrap(), "vehicles");
        let err = parse_generalization("Cars", "cars").unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::InvalidResponse);
        assert!(parse_generalization("  \n", "cars").is_err());
    }

    #[test]
    fn templates_are_filled() {
        let p = Prompt::new("A castle on a hill").unwrap();
        assert!(ChatExtractor::instruction(&p).contains("A castle on a hill"));
        let r = ChatRefiner::instruction("tall pine trees", &p);
        assert!(r.contains("\"tall pine trees\"") && r.contains("A castle on a hill"));
        assert!(!r.contains('{'));
    }
}
