//! Talking to model services over HTTP. A local scripted server stands in
//! for the chat and embedding services; the first call fails with 503 so
//! the retry shows up in the exchange log, where the API key is redacted.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use promptloop::adapters::{ChatExtractor, EndpointConfig, HttpClient, HttpLog, HttpScorer};
use promptloop::backends::{Extractor, Scorer};
use promptloop::fake_server::{RecordedRequest, ScriptedResponse, ScriptedServer};
use promptloop::scoring::cosine;
use promptloop::Prompt;
use serde_json::json;

fn toy_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 8];
    for (i, b) in text.to_lowercase().bytes().enumerate() {
        v[(b as usize + i) % 8] += 1.0;
    }
    v
}

fn main() {
    let calls = AtomicUsize::new(0);
    let server = ScriptedServer::with_handler(move |req: &RecordedRequest| {
        if calls.fetch_add(1, Ordering::SeqCst) == 0 {
            return ScriptedResponse::raw(503, r#"{"error":"warming up"}"#);
        }
        match req.path.as_str() {
            "/v1/extract" => ScriptedResponse::json(
                200,
                json!({ "keywords": ["Neon signs, Crowded streets, Flying cars"] }),
            ),
            "/v1/embed/text" => {
                let texts: Vec<String> = serde_json::from_value(req.json()["texts"].clone()).unwrap();
                let rows: Vec<Vec<f64>> = texts.iter().map(|t| toy_embedding(t)).collect();
                ScriptedResponse::json(200, json!({ "embeddings": rows, "dim": 8 }))
            }
            _ => ScriptedResponse::raw(404, "{}"),
        }
    })
    .unwrap();

    let log = HttpLog::new();
    let cfg = EndpointConfig {
        api_key: Some("sk-example-secret".into()),
        backoff_base_ms: 20,
        ..EndpointConfig::new(server.url())
    };
    let client = HttpClient::new(cfg, log.clone()).unwrap();

    let prompt = Prompt::new("Neon signs flicker over crowded streets. Cars fly above.").unwrap();
    let keywords = ChatExtractor::new(client.clone()).extract_keywords(&prompt).unwrap();
    println!("keywords: {}", keywords.phrases().join(", "));

    let scorer = HttpScorer::new(client);
    let texts: Vec<String> = keywords.phrases().iter().map(|s| s.to_string()).collect();
    let rows = scorer.embed_text(&texts).unwrap();
    let full = scorer.embed_text(&[prompt.text().to_string()]).unwrap();
    for (t, e) in texts.iter().zip(&rows) {
        println!("  {t:16} cos to prompt {:.4}", cosine(e, &full[0]).unwrap().value());
    }

    println!("exchange log:");
    for e in log.entries() {
        println!(
            "  {} attempt={} status={:?} backoff={:?}",
            e.url,
            e.attempt,
            e.status,
            e.backoff_ms.map(Duration::from_millis)
        );
    }
    let header = &server.requests()[0];
    println!("auth header sent: {}", header.header("authorization").is_some());
    let dumped = serde_json::to_string(&log.entries()).unwrap();
    println!("key in log: {}", dumped.contains("sk-example-secret"));
}
