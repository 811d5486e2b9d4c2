//! Streaming chat-completions endpoint.
//!
//! Implements the request/streaming-response subset of the chat-completions
//! wire shape: `model`, `messages`, `stream`, with chunked responses whose
//! `choices[0].delta` carries incremental text. Sampling parameters are
//! accepted and ignored by the deterministic stub generator. `stop_token_id`
//! configures the stub's stop condition; `priority` takes a level number or,
//! with three levels, `high`/`normal`/`low`.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::broker::Broker;
use crate::error::ServiceError;
use crate::task::{
    FinishReason, InferenceTask, Priority, StopCondition, StreamChunk, TaskEvent,
    TaskEventReceiver,
};

/// Per-model routing information the endpoint needs.
#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub default_max_tokens: u64,
    pub priority_levels: u8,
}

pub struct AppState {
    pub broker: Arc<Broker>,
    pub models: BTreeMap<String, ModelEntry>,
    started: Instant,
    next_task: AtomicU64,
}

impl AppState {
    pub fn new(broker: Arc<Broker>, models: BTreeMap<String, ModelEntry>) -> Arc<Self> {
        Arc::new(Self {
            broker,
            models,
            started: Instant::now(),
            next_task: AtomicU64::new(1),
        })
    }

    fn service_clock(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn task_id(&self) -> String {
        format!("task-{}", self.next_task.fetch_add(1, Ordering::Relaxed))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves the router on an already-bound listener.
pub async fn serve_http(
    state: Arc<AppState>,
    listener: tokio::net::TcpListener,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[allow(dead_code)]
    role: String,
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatRequest {
    model: String,
    messages: Vec<ChatMessage>,
    #[serde(default)]
    stream: Option<bool>,
    #[serde(default)]
    max_tokens: Option<u64>,
    #[serde(default)]
    priority: Option<serde_json::Value>,
    /// Token id that finishes the stream with `finish_reason: "stop"`.
    #[serde(default)]
    stop_token_id: Option<u32>,
    // sampling parameters: accepted, ignored
    #[serde(default)]
    #[allow(dead_code)]
    temperature: Option<f64>,
    #[serde(default)]
    #[allow(dead_code)]
    top_p: Option<f64>,
}

#[derive(Serialize)]
struct Delta {
    #[serde(skip_serializing_if = "Option::is_none")]
    role: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    content: Option<String>,
}

#[derive(Serialize)]
struct ChunkChoice {
    index: u32,
    delta: Delta,
    finish_reason: Option<&'static str>,
}

#[derive(Serialize)]
struct ChatChunk {
    id: String,
    object: &'static str,
    model: String,
    choices: Vec<ChunkChoice>,
    virtual_time: f64,
}

fn finish_str(f: FinishReason) -> &'static str {
    match f {
        FinishReason::Stop => "stop",
        FinishReason::Length => "length",
    }
}

fn chunk_json(model: &str, chunk: &StreamChunk) -> ChatChunk {
    ChatChunk {
        id: chunk.task_id.clone(),
        object: "chat.completion.chunk",
        model: model.to_string(),
        choices: vec![ChunkChoice {
            index: 0,
            delta: Delta {
                role: (chunk.index == 0).then_some("assistant"),
                content: (!chunk.token_text.is_empty()).then(|| chunk.token_text.clone()),
            },
            finish_reason: chunk.finish_reason.map(finish_str),
        }],
        virtual_time: chunk.virtual_time,
    }
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(json!({ "error": { "message": message } }))).into_response()
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    let models: Vec<&String> = state.models.keys().collect();
    Json(json!({
        "status": "ok",
        "models": models,
        "uptime_seconds": state.service_clock(),
    }))
    .into_response()
}

async fn chat_completions(
    State(state): State<Arc<AppState>>,
    Json(req): Json<ChatRequest>,
) -> Response {
    let Some(entry) = state.models.get(&req.model) else {
        return error_response(
            StatusCode::NOT_FOUND,
            format!("no registered instance serves model `{}`", req.model),
        );
    };
    let priority = match &req.priority {
        None => Priority(entry.priority_levels / 2),
        Some(serde_json::Value::Number(n)) => match n.as_u64() {
            Some(p) if p < entry.priority_levels as u64 => Priority(p as u8),
            _ => {
                return error_response(
                    StatusCode::BAD_REQUEST,
                    format!("priority out of range (levels: 0..{})", entry.priority_levels),
                )
            }
        },
        Some(serde_json::Value::String(s)) => {
            match Priority::parse(s, entry.priority_levels) {
                Ok(p) => p,
                Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
            }
        }
        Some(_) => {
            return error_response(
                StatusCode::BAD_REQUEST,
                "priority must be a number or name".into(),
            )
        }
    };

    let prompt = req
        .messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let task = InferenceTask {
        task_id: state.task_id(),
        model_name: req.model.clone(),
        priority,
        prompt,
        max_new_tokens: req.max_tokens.unwrap_or(entry.default_max_tokens).max(1),
        stop_condition: req
            .stop_token_id
            .map(StopCondition::Token)
            .unwrap_or(StopCondition::None),
        submit_time: state.service_clock(),
    };

    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
    if let Err(e) = state.broker.submit(task, tx) {
        let status = match e {
            ServiceError::Routing { .. } => StatusCode::NOT_FOUND,
            ServiceError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::SERVICE_UNAVAILABLE,
        };
        return error_response(status, e.to_string());
    }

    // the first event decides between an error status and a stream
    let first = match rx.recv().await {
        Some(ev) => ev,
        None => {
            return error_response(
                StatusCode::SERVICE_UNAVAILABLE,
                "instance dropped the task".into(),
            )
        }
    };
    let first = match first {
        TaskEvent::Rejected { reason, .. } => {
            return error_response(StatusCode::TOO_MANY_REQUESTS, reason)
        }
        TaskEvent::Chunk(c) => c,
    };

    if req.stream.unwrap_or(true) {
        Sse::new(chunk_stream(req.model.clone(), first, rx)).into_response()
    } else {
        aggregate_response(&req.model, first, rx).await
    }
}

/// SSE stream: one `data:` line per chunk, then `[DONE]`.
fn chunk_stream(
    model: String,
    first: StreamChunk,
    rx: TaskEventReceiver,
) -> impl Stream<Item = Result<Event, Infallible>> {
    enum StreamState {
        Pending(StreamChunk, TaskEventReceiver),
        Open(TaskEventReceiver),
        Finishing,
        Done,
    }
    futures::stream::unfold(
        StreamState::Pending(first, rx),
        move |state| {
            let model = model.clone();
            async move {
                match state {
                    StreamState::Pending(chunk, rx) => {
                        let terminal = chunk.finish_reason.is_some();
                        let event = Event::default()
                            .json_data(chunk_json(&model, &chunk))
                            .expect("chunk serializes");
                        let next = if terminal {
                            StreamState::Finishing
                        } else {
                            StreamState::Open(rx)
                        };
                        Some((Ok(event), next))
                    }
                    StreamState::Open(mut rx) => match rx.recv().await {
                        Some(TaskEvent::Chunk(chunk)) => {
                            let terminal = chunk.finish_reason.is_some();
                            let event = Event::default()
                                .json_data(chunk_json(&model, &chunk))
                                .expect("chunk serializes");
                            let next = if terminal {
                                StreamState::Finishing
                            } else {
                                StreamState::Open(rx)
                            };
                            Some((Ok(event), next))
                        }
                        // rejection cannot follow a first chunk; treat any
                        // other end as stream close
                        _ => Some((Ok(Event::default().data("[DONE]")), StreamState::Done)),
                    },
                    StreamState::Finishing => {
                        Some((Ok(Event::default().data("[DONE]")), StreamState::Done))
                    }
                    StreamState::Done => None,
                }
            }
        },
    )
}

/// Non-streaming mode: collect the whole completion.
async fn aggregate_response(model: &str, first: StreamChunk, mut rx: TaskEventReceiver) -> Response {
    let task_id = first.task_id.clone();
    let mut text = String::new();
    let mut finish = first.finish_reason;
    let mut tokens = 0u64;
    let mut chunk = Some(first);
    loop {
        let c = match chunk.take() {
            Some(c) => c,
            None => match rx.recv().await {
                Some(TaskEvent::Chunk(c)) => c,
                _ => break,
            },
        };
        if !c.token_text.is_empty() {
            tokens += 1;
        }
        text.push_str(&c.token_text);
        if c.finish_reason.is_some() {
            finish = c.finish_reason;
            break;
        }
    }
    Json(json!({
        "id": task_id,
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": text },
            "finish_reason": finish.map(finish_str),
        }],
        "usage": { "completion_tokens": tokens },
    }))
    .into_response()
}
