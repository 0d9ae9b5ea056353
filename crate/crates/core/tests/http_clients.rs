//! HTTP clients against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use curbsight_core::clients::http::{HttpDetector, HttpEmbedder, HttpVlm, ServiceEndpoint};
use curbsight_core::clients::{Detector, ImageEmbedder, ImageRef, TextEmbedder, Tracer, VisionLanguageModel, VlmRequest};
use curbsight_core::Error;
use image::RgbImage;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves `script` in order, one response per connection, and records
/// every request. Extra requests get a 500.
struct FakeServer {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl FakeServer {
    fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            let mut script = script.into_iter();
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                let (mut len, mut auth) = (0usize, None);
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (k, v) = line.split_once(':').unwrap();
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => auth = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen { path, auth, body: serde_json::from_slice(&body).unwrap_or(Value::Null) });
                let (status, payload) = script.next().unwrap_or((500, "exhausted".into()));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self { url, seen }
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn endpoint(url: &str) -> ServiceEndpoint {
    let mut e = ServiceEndpoint::new(url, "test-model");
    e.backoff_ms = 1;
    e.max_retries = 2;
    e.timeout_secs = 5.0;
    e
}

fn tiny() -> RgbImage {
    RgbImage::from_pixel(8, 4, image::Rgb([10, 20, 30]))
}

#[test]
fn embedder_retries_server_errors_then_succeeds() {
    let server = FakeServer::start(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, json!({"data": [{"embedding": [3.0, 4.0]}]}).to_string()),
    ]);
    let emb = HttpEmbedder::new("text_embedder", endpoint(&server.url), 2, None).unwrap();
    let v = emb.embed_text("kerb ramp").unwrap();
    assert_eq!(v.dim(), 2);
    let reqs = server.requests();
    assert_eq!(reqs.len(), 3);
    assert!(reqs.iter().all(|r| r.path == "/embeddings"));
    assert_eq!(reqs[0].body["input"], "kerb ramp");
    assert_eq!(reqs[0].body["model"], "test-model");
}

#[test]
fn retries_are_bounded() {
    let server = FakeServer::start(vec![(500, "a".into()), (500, "b".into()), (500, "c".into()), (200, "{}".into())]);
    let emb = HttpEmbedder::new("text_embedder", endpoint(&server.url), 2, None).unwrap();
    let err = emb.embed_text("x").unwrap_err();
    assert!(matches!(err, Error::Service { .. }), "{err:?}");
    assert!(err.to_string().contains("3 attempts"), "{err}");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = FakeServer::start(vec![(400, "bad request".into())]);
    let emb = HttpEmbedder::new("text_embedder", endpoint(&server.url), 2, None).unwrap();
    let err = emb.embed_text("x").unwrap_err();
    assert!(err.to_string().contains("400"), "{err}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn wrong_embedding_dimension_is_rejected() {
    let server = FakeServer::start(vec![(200, json!({"data": [{"embedding": [1.0, 2.0, 3.0]}]}).to_string())]);
    let emb = HttpEmbedder::new("image_embedder", endpoint(&server.url), 2, None).unwrap();
    let img = tiny();
    assert!(emb.embed_image(ImageRef { id: "a", raster: &img }).is_err());
    let body = &server.requests()[0].body;
    assert!(body["input"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[test]
fn detector_parses_parallel_arrays() {
    let server = FakeServer::start(vec![(
        200,
        json!({"boxes": [[1.0, 2.0, 5.0, 6.0]], "labels": ["bollard"], "scores": [0.75]}).to_string(),
    )]);
    let det = HttpDetector::new(endpoint(&server.url), None).unwrap();
    let img = tiny();
    let hits = det.detect_raw(ImageRef { id: "a", raster: &img }, &["bollard".into()]).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].label, "bollard");
    assert_eq!(hits[0].confidence, 0.75);
    assert_eq!((hits[0].bbox.x_min, hits[0].bbox.y_max), (1.0, 6.0));
    let req = &server.requests()[0];
    assert_eq!(req.path, "/detect");
    assert_eq!(req.body["captions"], json!(["bollard"]));
}

#[test]
fn detector_rejects_mismatched_arrays() {
    let server = FakeServer::start(vec![(200, json!({"boxes": [[1.0, 2.0, 5.0, 6.0]], "labels": [], "scores": [0.5]}).to_string())]);
    let det = HttpDetector::new(endpoint(&server.url), None).unwrap();
    let img = tiny();
    let err = det.detect_raw(ImageRef { id: "a", raster: &img }, &["bollard".into()]).unwrap_err();
    assert!(err.to_string().contains("malformed"), "{err}");
}

#[test]
fn vlm_sends_images_before_prompt_and_traces_redacted() {
    let server = FakeServer::start(vec![(200, json!({"choices": [{"message": {"content": "{\"category\": \"Bollard\"}"}}]}).to_string())]);
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("trace.jsonl");
    let tracer = Arc::new(Tracer::create(&trace_path).unwrap());
    let vlm = HttpVlm::new(endpoint(&server.url), Some(tracer)).unwrap();
    let (crop, wide) = (tiny(), tiny());
    let reply = vlm
        .complete(&VlmRequest {
            system: Some("be brief"),
            prompt: "describe",
            images: vec![ImageRef { id: "crop", raster: &crop }, ImageRef { id: "wide", raster: &wide }],
        })
        .unwrap();
    assert_eq!(reply, "{\"category\": \"Bollard\"}");
    let req = &server.requests()[0];
    assert_eq!(req.path, "/chat/completions");
    let messages = req.body["messages"].as_array().unwrap();
    assert_eq!(messages[0]["role"], "system");
    let parts = messages[1]["content"].as_array().unwrap();
    assert_eq!(parts.len(), 3);
    assert_eq!(parts[0]["type"], "image_url");
    assert_eq!(parts[2]["text"], "describe");

    let trace = std::fs::read_to_string(&trace_path).unwrap();
    assert_eq!(trace.lines().count(), 1);
    assert!(!trace.contains("base64"));
    assert!(trace.contains("<image crop 8x4>"));
}

#[test]
fn explicit_token_variable_is_sent_as_bearer() {
    let server = FakeServer::start(vec![(200, json!({"data": [{"embedding": [1.0, 0.0]}]}).to_string())]);
    let mut e = endpoint(&server.url);
    e.token_env = Some("CURBSIGHT_HTTP_TEST_TOKEN".into());
    // Only this test touches the variable.
    unsafe { std::env::set_var("CURBSIGHT_HTTP_TEST_TOKEN", "s3cret") };
    let emb = HttpEmbedder::new("text_embedder", e, 2, None).unwrap();
    emb.embed_text("x").unwrap();
    assert_eq!(server.requests()[0].auth.as_deref(), Some("Bearer s3cret"));
}

#[test]
fn missing_token_variable_is_a_config_error() {
    let mut e = ServiceEndpoint::new("http://127.0.0.1:9", "m");
    e.token_env = Some("CURBSIGHT_HTTP_TEST_UNSET".into());
    let emb = HttpEmbedder::new("text_embedder", e, 2, None).unwrap();
    assert!(matches!(emb.embed_text("x"), Err(Error::Config(_))));
}

#[test]
fn endpoint_validation() {
    assert!(HttpVlm::new(ServiceEndpoint::new("ftp://x", "m"), None).is_err());
    let mut e = ServiceEndpoint::new("http://x", "m");
    e.max_concurrency = 0;
    assert!(HttpVlm::new(e, None).is_err());
}
