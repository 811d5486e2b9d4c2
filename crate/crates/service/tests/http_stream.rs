//! HTTP-level checks: streaming chat completions over a real socket,
//! health, and error statuses.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rackline_core::config::Scenario;
use rackline_service::http::{serve_http, AppState, ModelEntry};
use rackline_service::{spawn_instance, Broker};
use serde_json::Value;

fn toy_scenario() -> Scenario {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/scenarios/toy-pipeline.toml");
    Scenario::load(&path).unwrap()
}

async fn start_service() -> (String, rackline_service::InstanceHandle) {
    let scenario = toy_scenario();
    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, None).unwrap();
    let mut models = BTreeMap::new();
    models.insert(
        scenario.bundle.model.name.clone(),
        ModelEntry {
            default_max_tokens: scenario.service.max_new_tokens,
            priority_levels: scenario.priorities() as u8,
        },
    );
    let state = AppState::new(broker, models);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_http(state, listener));
    (format!("http://{addr}"), handle)
}

fn sse_chunks(body: &str) -> Vec<Value> {
    body.split("\n\n")
        .filter_map(|block| block.trim().strip_prefix("data: "))
        .filter(|data| *data != "[DONE]")
        .map(|data| serde_json::from_str(data).expect("chunk is JSON"))
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn streaming_completion_over_http() {
    let (base, handle) = start_service().await;
    let client = reqwest::Client::new();
    let resp = client
        .post(format!("{base}/v1/chat/completions"))
        .json(&serde_json::json!({
            "model": "toy",
            "messages": [{"role": "user", "content": "Hi"}],
            "stream": true,
            "max_tokens": 5,
            "priority": "high",
        }))
        .send()
        .await
        .unwrap();
    assert!(resp.status().is_success());
    let body = resp.text().await.unwrap();
    assert!(body.contains("[DONE]"));

    let chunks = sse_chunks(&body);
    assert_eq!(chunks.len(), 5);
    assert_eq!(chunks[0]["object"], "chat.completion.chunk");
    assert_eq!(chunks[0]["choices"][0]["delta"]["role"], "assistant");
    // terminal chunk at index 4 carries finish_reason=length
    assert_eq!(chunks[4]["choices"][0]["finish_reason"], "length");
    for c in &chunks[..4] {
        assert!(c["choices"][0]["finish_reason"].is_null());
    }
    handle.shutdown().unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn non_streaming_mode_aggregates() {
    let (base, handle) = start_service().await;
    let client = reqwest::Client::new();
    let resp: Value = client
        .post(format!("{base}/v1/chat/completions"))
        .json(&serde_json::json!({
            "model": "toy",
            "messages": [{"role": "user", "content": "Hi"}],
            "stream": false,
            "max_tokens": 4,
        }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(resp["object"], "chat.completion");
    assert_eq!(resp["usage"]["completion_tokens"], 4);
    assert_eq!(
        resp["choices"][0]["message"]["content"]
            .as_str()
            .unwrap()
            .len(),
        4
    );
    handle.shutdown().unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_model_is_404_and_bad_priority_is_400() {
    let (base, handle) = start_service().await;
    let client = reqwest::Client::new();
    let resp = client
        .post(format!("{base}/v1/chat/completions"))
        .json(&serde_json::json!({
            "model": "missing",
            "messages": [{"role": "user", "content": "Hi"}],
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);

    let resp = client
        .post(format!("{base}/v1/chat/completions"))
        .json(&serde_json::json!({
            "model": "toy",
            "messages": [{"role": "user", "content": "Hi"}],
            "priority": 9,
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    handle.shutdown().unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn healthz_reports_models() {
    let (base, handle) = start_service().await;
    let resp: Value = reqwest::get(format!("{base}/healthz"))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(resp["status"], "ok");
    assert_eq!(resp["models"][0], "toy");
    handle.shutdown().unwrap();
}
