use std::fs;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use promptloop::adapters::{
    ChatExtractor, ChatRefiner, EndpointConfig, GeneratorSettings, HttpClient, HttpGenerator,
    HttpLog, HttpScorer,
};
use promptloop::backends::{
    latent_png, BackendErrorKind, Extractor, GenerationRequest, Generator, Refiner, Scorer,
    SimBackends, SimWorldConfig,
};
use promptloop::cli::run_cli;
use promptloop::fake_server::{RecordedRequest, ScriptedResponse, ScriptedServer};
use promptloop::trace::read_trace_lines;
use promptloop::{Embedding, ImagePayload, ImageRef, Prompt};
use serde_json::{json, Value};

const SECRET: &str = "sk-contract-SECRET-42";

fn client(server: &ScriptedServer, log: &HttpLog) -> (HttpClient, Arc<Mutex<Vec<Duration>>>) {
    let mut cfg = EndpointConfig::new(server.url());
    cfg.api_key = Some(SECRET.into());
    cfg.backoff_base_ms = 25;
    cfg.timeout_ms = 2_000;
    let slept = Arc::new(Mutex::new(Vec::new()));
    let recorder = slept.clone();
    let c = HttpClient::new(cfg, log.clone())
        .unwrap()
        .with_sleeper(Arc::new(move |d| recorder.lock().unwrap().push(d)));
    (c, slept)
}

fn png(values: &[f64]) -> String {
    B64.encode(latent_png::encode(&Embedding::new(values.to_vec()).unwrap()).unwrap())
}

fn request(batch_size: usize) -> GenerationRequest {
    GenerationRequest {
        prompt: "(castle:1.1), snow".into(),
        negative_prompt: "blurry".into(),
        batch_size,
        seed: 42,
        iteration: 3,
    }
}

#[test]
fn retries_follow_exponential_backoff() {
    let server = ScriptedServer::start(vec![
        ScriptedResponse::raw(500, "{}"),
        ScriptedResponse::raw(502, "{}"),
        ScriptedResponse::json(200, json!({"keywords": ["castle, snow"]})),
    ])
    .unwrap();
    let log = HttpLog::new();
    let (c, slept) = client(&server, &log);
    let kws = ChatExtractor::new(c)
        .extract_keywords(&Prompt::new("castle in snow").unwrap())
        .unwrap();
    assert_eq!(kws.phrases(), ["castle", "snow"]);
    assert_eq!(*slept.lock().unwrap(), [Duration::from_millis(25), Duration::from_millis(50)]);
    let backoffs: Vec<_> = log.entries().iter().map(|e| e.backoff_ms).collect();
    assert_eq!(backoffs, [Some(25), Some(50), None]);
}

#[test]
fn exhausted_retries_surface_model_failure() {
    let server = ScriptedServer::start(vec![]).unwrap();
    let log = HttpLog::new();
    let (c, slept) = client(&server, &log);
    let err = c.post_json("/v1/extract", &json!({"prompt": "x"})).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::ModelFailure);
    assert!(err.retryable);
    assert_eq!(server.requests().len(), 3);
    assert_eq!(slept.lock().unwrap().len(), 2);
}

#[test]
fn status_classification() {
    let cases = [
        (ScriptedResponse::raw(200, "<html>oops</html>"), BackendErrorKind::Protocol, 1),
        (ScriptedResponse::raw(400, "{\"error\":\"bad\"}"), BackendErrorKind::Protocol, 1),
        (ScriptedResponse::raw(401, "{}"), BackendErrorKind::Protocol, 1),
        (ScriptedResponse::raw(429, "{}"), BackendErrorKind::Timeout, 3),
        (ScriptedResponse::json(200, json!({"nope": 1})), BackendErrorKind::InvalidResponse, 1),
    ];
    for (response, kind, attempts) in cases {
        let server = ScriptedServer::start(vec![response.clone(), response.clone(), response]).unwrap();
        let (c, _) = client(&server, &HttpLog::new());
        let err = ChatExtractor::new(c)
            .extract_keywords(&Prompt::new("castle").unwrap())
            .unwrap_err();
        assert_eq!(err.kind, kind, "{err}");
        assert_eq!(server.requests().len(), attempts, "{kind:?}");
    }
}

#[test]
fn slow_responses_time_out() {
    let slow = ScriptedResponse::json(200, json!({"keywords": ["castle"]})).delayed(Duration::from_millis(400));
    let server = ScriptedServer::start(vec![slow.clone(), slow.clone(), slow]).unwrap();
    let mut cfg = EndpointConfig::new(server.url());
    cfg.timeout_ms = 100;
    cfg.max_retries = 0;
    let c = HttpClient::new(cfg, HttpLog::new()).unwrap();
    let err = c.post_json("/v1/extract", &json!({"prompt": "x"})).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::Timeout);
    assert!(err.retryable);
}

#[test]
fn refused_connection_is_retryable_protocol_error() {
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut cfg = EndpointConfig::new(format!("http://{addr}"));
    cfg.max_retries = 1;
    let slept = Arc::new(Mutex::new(0));
    let counter = slept.clone();
    let c = HttpClient::new(cfg, HttpLog::new())
        .unwrap()
        .with_sleeper(Arc::new(move |_| *counter.lock().unwrap() += 1));
    let err = c.post_json("/v1/extract", &json!({})).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::Protocol);
    assert!(err.retryable);
    assert_eq!(*slept.lock().unwrap(), 1);
}

#[test]
fn bearer_auth_and_secret_redaction() {
    let server = ScriptedServer::with_handler(|req: &RecordedRequest| {
        // A misbehaving service that echoes the credentials back.
        ScriptedResponse::raw(500, json!({"echo": req.header("authorization")}).to_string())
    })
    .unwrap();
    let log = HttpLog::new();
    let (c, _) = client(&server, &log);
    let err = c
        .post_json("/v1/extract", &json!({"prompt": format!("my key is {SECRET}")}))
        .unwrap_err();
    for r in server.requests() {
        assert_eq!(r.header("Authorization"), Some(format!("Bearer {SECRET}").as_str()));
        assert_eq!(r.header("content-type"), Some("application/json"));
    }
    assert!(!err.to_string().contains(SECRET));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("http_log.jsonl");
    log.write_jsonl(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(!text.contains(SECRET), "{text}");
    assert!(text.contains("[REDACTED]"));
}

#[test]
fn long_bodies_are_truncated_in_the_log() {
    let server = ScriptedServer::start(vec![ScriptedResponse::json(
        200,
        json!({"keywords": ["x".repeat(10_000)]}),
    )])
    .unwrap();
    let log = HttpLog::new();
    let (c, _) = client(&server, &log);
    c.post_json("/v1/extract", &json!({"prompt": "x"})).unwrap();
    assert!(log.entries()[0].response.len() < 2_100);
}

#[test]
fn generator_request_shape_and_files() {
    let images: Vec<String> = (0..4).map(|i| png(&[1.0, i as f64])).collect();
    let server = ScriptedServer::start(vec![ScriptedResponse::json(200, json!({ "images": images }))]).unwrap();
    let (c, _) = client(&server, &HttpLog::new());
    let dir = tempfile::tempdir().unwrap();
    let settings = GeneratorSettings { width: 640, height: 384, steps: 20 };
    let refs = HttpGenerator::new(c, settings, dir.path()).generate(&request(4)).unwrap();

    let body = server.requests()[0].json();
    assert_eq!(server.requests()[0].path, "/v1/generate");
    assert_eq!(
        body,
        json!({"prompt": "(castle:1.1), snow", "negative_prompt": "blurry", "batch_size": 4,
               "seed": 42, "width": 640, "height": 384, "steps": 20})
    );
    assert_eq!(refs.len(), 4);
    for (i, r) in refs.iter().enumerate() {
        assert_eq!(r.id, format!("iter03-img{i:02}"));
        let ImagePayload::Path(p) = &r.payload else { panic!("path payload") };
        assert_eq!(p, &dir.path().join(format!("iter03/img{i:02}.png")));
        let latent = latent_png::decode(&fs::read(p).unwrap()).unwrap();
        assert_eq!(latent.values(), &[1.0, i as f64]);
    }
}

#[test]
fn short_batch_is_a_mismatch_and_writes_nothing() {
    let images: Vec<String> = (0..15).map(|i| png(&[1.0, i as f64])).collect();
    let server = ScriptedServer::start(vec![ScriptedResponse::json(200, json!({ "images": images }))]).unwrap();
    let (c, _) = client(&server, &HttpLog::new());
    let dir = tempfile::tempdir().unwrap();
    let err = HttpGenerator::new(c, GeneratorSettings::default(), dir.path())
        .generate(&request(16))
        .unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::BatchSizeMismatch);
    assert!(!err.retryable);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn undecodable_image_writes_nothing() {
    let images = vec![png(&[1.0, 0.0]), B64.encode(b"GIF89a not a png")];
    let server = ScriptedServer::start(vec![ScriptedResponse::json(200, json!({ "images": images }))]).unwrap();
    let (c, _) = client(&server, &HttpLog::new());
    let dir = tempfile::tempdir().unwrap();
    let err = HttpGenerator::new(c, GeneratorSettings::default(), dir.path())
        .generate(&request(2))
        .unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::InvalidResponse);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

fn embed_handler(req: &RecordedRequest) -> ScriptedResponse {
    let body = req.json();
    let rows: Vec<Vec<f64>> = match req.path.as_str() {
        "/v1/embed/image" => body["images"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| {
                let bytes = B64.decode(b.as_str().unwrap()).unwrap();
                latent_png::decode(&bytes).unwrap().values().to_vec()
            })
            .collect(),
        _ => body["texts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| vec![t.as_str().unwrap().len() as f64, 1.0])
            .collect(),
    };
    ScriptedResponse::json(200, json!({"embeddings": rows, "dim": 2}))
}

#[test]
fn image_embeddings_keep_order_across_parallel_chunks() {
    let server = ScriptedServer::with_handler(embed_handler).unwrap();
    let (c, _) = client(&server, &HttpLog::new());
    let scorer = HttpScorer::new(c).with_parallelism(3);
    let images: Vec<ImageRef> = (0..7)
        .map(|i| {
            let e = Embedding::new(vec![1.0, i as f64]).unwrap();
            ImageRef::new(0, i, ImagePayload::Latent(e))
        })
        .collect();
    let out = scorer.embed_image(&images).unwrap();
    let seconds: Vec<f64> = out.iter().map(|e| e.values()[1]).collect();
    assert_eq!(seconds, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(server.requests().len(), 3);

    let texts = vec!["a".to_string(), "castle".to_string()];
    let rows = scorer.embed_text(&texts).unwrap();
    assert_eq!(rows[1].values(), &[6.0, 1.0]);
}

#[test]
fn embedding_shape_violations() {
    let cases = [
        (json!({"embeddings": [[1.0, 0.0], [1.0]], "dim": 2}), BackendErrorKind::DimensionMismatch),
        (json!({"embeddings": [[1.0, 0.0, 0.0]], "dim": 3}), BackendErrorKind::InvalidResponse),
        (json!({"embeddings": [[1.0], [2.0]], "dim": 2}), BackendErrorKind::DimensionMismatch),
    ];
    for (body, kind) in cases {
        let server = ScriptedServer::start(vec![ScriptedResponse::json(200, body)]).unwrap();
        let (c, _) = client(&server, &HttpLog::new());
        let err = HttpScorer::new(c)
            .embed_text(&["castle".to_string(), "snow".to_string()])
            .unwrap_err();
        assert_eq!(err.kind, kind, "{err}");
    }
}

#[test]
fn refiner_round_trip() {
    let server = ScriptedServer::start(vec![
        ScriptedResponse::json(200, json!({"keywords": ["cabin"]})),
        ScriptedResponse::json(200, json!({"keywords": ["Cozy, rustic cabin"]})),
    ])
    .unwrap();
    let (c, _) = client(&server, &HttpLog::new());
    let refiner = ChatRefiner::new(c);
    let context = Prompt::new("A cozy, rustic cabin sits in a snowy forest.").unwrap();
    assert_eq!(refiner.refine_keyword("Cozy, rustic cabin", &context).unwrap(), "cabin");
    let sent = server.requests()[0].json();
    let instruction = sent["prompt"].as_str().unwrap();
    assert!(instruction.contains("\"Cozy, rustic cabin\"") && instruction.contains("snowy forest"));

    let err = refiner.refine_keyword("Cozy, rustic cabin", &context).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::InvalidResponse);
}

/// Serves all four endpoints from an in-process sim world.
fn sim_service() -> ScriptedServer {
    let sims = Arc::new(SimBackends::new(SimWorldConfig::default()).unwrap());
    ScriptedServer::with_handler(move |req: &RecordedRequest| {
        let body: Value = req.json();
        let reply = match req.path.as_str() {
            "/v1/extract" => {
                let prompt = body["prompt"].as_str().unwrap();
                let keywords: Vec<String> = if let Some(rest) = prompt.split("keyword \"").nth(1) {
                    let phrase = rest.split('"').next().unwrap();
                    vec![sims.refiner.generalize(phrase)]
                } else {
                    let description = prompt.rsplit("Scene description:\n").next().unwrap();
                    let set = sims.extractor.extract_keywords(&Prompt::new(description).unwrap()).unwrap();
                    vec![set.phrases().join(", ")]
                };
                json!({ "keywords": keywords })
            }
            "/v1/generate" => {
                let req = GenerationRequest {
                    prompt: body["prompt"].as_str().unwrap().into(),
                    negative_prompt: String::new(),
                    batch_size: body["batch_size"].as_u64().unwrap() as usize,
                    seed: body["seed"].as_u64().unwrap(),
                    iteration: 0,
                };
                let images: Vec<String> = sims
                    .generator
                    .generate(&req)
                    .unwrap()
                    .iter()
                    .map(|r| match &r.payload {
                        ImagePayload::Latent(l) => png(l.values()),
                        _ => unreachable!(),
                    })
                    .collect();
                json!({ "images": images })
            }
            "/v1/embed/text" => {
                let texts: Vec<String> = serde_json::from_value(body["texts"].clone()).unwrap();
                let rows: Vec<Vec<f64>> = sims
                    .scorer
                    .embed_text(&texts)
                    .unwrap()
                    .iter()
                    .map(|e| e.values().to_vec())
                    .collect();
                json!({ "embeddings": rows, "dim": sims.world.dim() })
            }
            "/v1/embed/image" => return embed_handler_dim(req, sims.world.dim()),
            other => return ScriptedResponse::raw(404, format!("{{\"error\":\"{other}\"}}")),
        };
        ScriptedResponse::json(200, reply)
    })
    .unwrap()
}

fn embed_handler_dim(req: &RecordedRequest, dim: usize) -> ScriptedResponse {
    let mut r = embed_handler(req);
    let mut v: Value = serde_json::from_str(&r.body).unwrap();
    v["dim"] = json!(dim);
    r.body = v.to_string();
    r
}

#[test]
fn http_run_matches_sim_run() {
    let server = sim_service();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("http.toml");
    fs::write(
        &config,
        format!(
            "prompt = \"A castle on a mountain. Snow falls on the valley.\"\nbackend = \"http\"\nbatch_size = 4\nseed = 5\naggregation = \"mean_over_batch\"\n\n[http]\nbase_url = \"{}\"\napi_key = \"{SECRET}\"\n",
            server.url()
        ),
    )
    .unwrap();
    let http_out = dir.path().join("http");
    let sim_out = dir.path().join("sim");
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let code = run_cli(
        ["promptloop", "run", "--config", config.to_str().unwrap(), "--out", http_out.to_str().unwrap()],
        &mut stdout,
        &mut stderr,
    );
    assert!(code == 0 || code == 3, "{}", String::from_utf8_lossy(&stderr));
    let http_summary = String::from_utf8(stdout).unwrap();

    let mut stdout = Vec::new();
    let code_sim = run_cli(
        [
            "promptloop", "run", "--config", config.to_str().unwrap(), "--backend", "sim",
            "--out", sim_out.to_str().unwrap(),
        ],
        &mut stdout,
        &mut Vec::new(),
    );
    assert_eq!(code, code_sim);
    assert_eq!(http_summary, String::from_utf8(stdout).unwrap());

    let http_lines = read_trace_lines(&http_out).unwrap();
    let sim_lines = read_trace_lines(&sim_out).unwrap();
    assert_eq!(http_lines.len(), sim_lines.len());
    for (h, s) in http_lines.iter().zip(&sim_lines) {
        assert_eq!(h.rendered_prompt, s.rendered_prompt);
        assert_eq!(h.images, s.images);
        for (a, b) in h.keyword_scores.iter().zip(&s.keyword_scores) {
            assert_eq!(a.phrase, b.phrase);
            assert!((a.aggregated.value() - b.aggregated.value()).abs() < 1e-12);
        }
    }
    assert!(http_out.join("iter00/img03.png").is_file());
    let log = fs::read_to_string(http_out.join("http_log.jsonl")).unwrap();
    assert!(!log.contains(SECRET) && log.contains("/v1/embed/image"));
}
