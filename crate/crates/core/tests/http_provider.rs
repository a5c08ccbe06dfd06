use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use surrogate_core::annotator::*;
use surrogate_core::corpus::{TaskSpec, TextSample};

#[derive(Clone)]
struct Fake {
    calls: Arc<AtomicUsize>,
    fail_first: usize,
}

async fn chat(State(f): State<Fake>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = f.calls.fetch_add(1, Ordering::SeqCst);
    if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some("Bearer sekrit") {
        return (StatusCode::UNAUTHORIZED, Json(json!({"error": "bad token"})));
    }
    if n < f.fail_first {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"error": "busy"})));
    }
    assert_eq!(body["model"], "test-model");
    let user = body["messages"][1]["content"].as_str().unwrap();
    // answer YES for texts mentioning "cat"
    let answer: Vec<String> = user
        .lines()
        .map(|l| {
            let (num, text) = l.split_once(": ").unwrap();
            format!("{num}: {}", if text.contains("cat") { "YES" } else { "NO" })
        })
        .collect();
    (
        StatusCode::OK,
        Json(json!({
            "choices": [{"message": {"role": "assistant", "content": answer.join("\n")}}],
            "usage": {"prompt_tokens": 100, "completion_tokens": 20}
        })),
    )
}

fn serve(fake: Fake) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(fake);
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}/v1", rx.recv().unwrap())
}

fn samples() -> Vec<TextSample> {
    (0..12).map(|i| TextSample::new(format!("s{i}"), if i % 4 == 0 { format!("a cat {i}") } else { format!("a dog {i}") })).collect()
}

fn config(base_url: String) -> ProviderConfig {
    ProviderConfig { base_url, model_name: "test-model".into(), retry_backoff_ms: 1, ..ProviderConfig::default() }
}

#[test]
fn labels_over_http_with_retry() {
    let calls = Arc::new(AtomicUsize::new(0));
    let url = serve(Fake { calls: calls.clone(), fail_first: 1 });
    let cfg = ProviderConfig { max_in_flight: 1, ..config(url) };
    let provider = HttpProvider::with_token(&cfg, "sekrit".into()).unwrap();
    let task = TaskSpec::binary("cats", "cat", "not_cat");
    let prompt = PromptVersion::yes_no(&task, 1);
    let run = annotate(&samples(), &task, &prompt, &provider, &cfg, 1, &AnnotationCache::in_memory()).unwrap();
    assert_eq!(run.records.len(), 12);
    assert_eq!(run.stats.retries, 1);
    assert_eq!(calls.load(Ordering::SeqCst), 3);
    // two successful responses of 100 + 20 tokens
    assert_eq!(run.ledger.input_tokens, 200);
    assert_eq!(run.ledger.output_tokens, 40);
    for (r, s) in run.records.iter().zip(samples()) {
        let want = if s.text.contains("cat") { "cat" } else { "not_cat" };
        assert_eq!(r.label.as_deref(), Some(want));
    }
}

#[test]
fn wrong_token_is_rejected_without_retry() {
    let calls = Arc::new(AtomicUsize::new(0));
    let url = serve(Fake { calls: calls.clone(), fail_first: 0 });
    let cfg = ProviderConfig { max_in_flight: 1, ..config(url) };
    let provider = HttpProvider::with_token(&cfg, "wrong".into()).unwrap();
    let task = TaskSpec::binary("cats", "cat", "not_cat");
    let prompt = PromptVersion::yes_no(&task, 1);
    let err = annotate(&samples()[..3], &task, &prompt, &provider, &cfg, 1, &AnnotationCache::in_memory()).unwrap_err();
    assert!(matches!(err, AnnotateError::Rejected { status: 401, .. }), "{err}");
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn closed_port_is_unreachable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = ProviderConfig { max_retries: 2, timeout_secs: 2, ..config(format!("http://127.0.0.1:{port}/v1")) };
    let provider = HttpProvider::with_token(&cfg, "sekrit".into()).unwrap();
    let task = TaskSpec::binary("cats", "cat", "not_cat");
    let prompt = PromptVersion::yes_no(&task, 1);
    let err = annotate(&samples()[..2], &task, &prompt, &provider, &cfg, 1, &AnnotationCache::in_memory()).unwrap_err();
    assert!(matches!(err, AnnotateError::ProviderUnreachable { attempts: 3, .. }), "{err}");
}
