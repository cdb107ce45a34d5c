use std::sync::{Arc, Mutex};
use std::thread;

use lot_core::model_client::{HttpModel, LanguageModel, ModelEndpoint, RetryPolicy, SamplingParams, ScoringMode};
use lot_core::Error;
use serde_json::{json, Value};

/// Serves `replies` in order, one per request, recording request bodies.
fn serve(replies: Vec<(u16, Value)>) -> (String, Arc<Mutex<Vec<Value>>>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok(mut req) = server.recv() else { return };
            let mut text = String::new();
            req.as_reader().read_to_string(&mut text).unwrap();
            log.lock().unwrap().push(serde_json::from_str::<Value>(&text).unwrap_or(Value::Null));
            let resp = tiny_http::Response::from_string(body.to_string()).with_status_code(status);
            let _ = req.respond(resp);
        }
    });
    (url, seen)
}

fn endpoint(url: &str, mode: ScoringMode) -> ModelEndpoint {
    ModelEndpoint {
        scoring_mode: mode,
        retry_policy: RetryPolicy { max_retries: 2, initial_backoff_secs: 0.0 },
        timeout_secs: 5.0,
        ..ModelEndpoint::new(url, "test-model")
    }
}

#[test]
fn echo_scoring_keeps_continuation_tokens() {
    let reply = json!({"choices": [{"text": "Q a b", "logprobs": {
        "tokens": ["Q", " a", " b"],
        "token_logprobs": [null, -0.5, -1.25],
        "text_offset": [0, 1, 3],
    }}]});
    let (url, seen) = serve(vec![(200, reply)]);
    let m = HttpModel::new(endpoint(&url, ScoringMode::Echo)).unwrap();
    let s = m.score("Q", " a b").unwrap();
    assert_eq!(s.token_logprobs, vec![-0.5, -1.25]);
    let body = &seen.lock().unwrap()[0];
    assert_eq!(body["echo"], json!(true));
    assert_eq!(body["max_tokens"], json!(0));
    assert_eq!(body["prompt"], json!("Q a b"));
}

#[test]
fn server_errors_are_retried() {
    let ok = json!({"choices": [{"text": " step one."}]});
    let (url, _) = serve(vec![(500, json!({})), (429, json!({})), (200, ok)]);
    let m = HttpModel::new(endpoint(&url, ScoringMode::Echo)).unwrap();
    let text = m.complete("prompt", &SamplingParams::default()).unwrap();
    assert_eq!(text, " step one.");
    assert_eq!(m.request_count(), 3);
}

#[test]
fn retries_run_out() {
    let (url, _) = serve(vec![(503, json!({})); 3]);
    let m = HttpModel::new(endpoint(&url, ScoringMode::Echo)).unwrap();
    match m.complete("prompt", &SamplingParams::default()) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let m = HttpModel::new(endpoint(&format!("http://127.0.0.1:{port}"), ScoringMode::Echo)).unwrap();
    assert!(matches!(m.score("a", " b"), Err(Error::Transport { .. })));
}

#[test]
fn rejected_request_is_capability_error() {
    let (url, _) = serve(vec![(400, json!({"error": "echo not supported"}))]);
    let m = HttpModel::new(endpoint(&url, ScoringMode::Echo)).unwrap();
    assert!(matches!(m.score("a", " b"), Err(Error::Capability(_))));
}

#[test]
fn auto_falls_back_to_chunked() {
    let no_echo = json!({"choices": [{"text": "", "logprobs": null}]});
    let top = |tok: &str, lp: f64| json!({"choices": [{"text": tok, "logprobs": {"top_logprobs": [{ tok: lp, " zz": -9.0 }]}}]});
    let (url, seen) = serve(vec![(200, no_echo), (200, top(" a", -0.25)), (200, top(" b", -2.0))]);
    let m = HttpModel::new(endpoint(&url, ScoringMode::Auto)).unwrap();
    let s = m.score("Q", " a b").unwrap();
    assert_eq!(s.token_logprobs, vec![-0.25, -2.0]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[1]["prompt"], json!("Q"));
    assert_eq!(seen[2]["prompt"], json!("Q a"));
}

#[test]
fn chunked_segment_missing_from_alternatives() {
    let reply = json!({"choices": [{"text": "x", "logprobs": {"top_logprobs": [{" other": -0.1}]}}]});
    let (url, _) = serve(vec![(200, reply)]);
    let m = HttpModel::new(endpoint(&url, ScoringMode::Chunked)).unwrap();
    assert!(matches!(m.score("Q", " a"), Err(Error::Capability(_))));
}
