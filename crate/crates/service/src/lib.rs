//! Serving harness for the pipeline simulator: a streaming chat-completions
//! endpoint, an in-process priority broker, ring-based startup readiness,
//! and sequence-head scheduler threads that drive live engine sessions with
//! dynamic batching.
//!
//! Roles communicate only by message passing: the endpoint publishes tasks
//! to the broker, each instance's scheduler consumes them as its worker
//! pool frees up, and tokens stream back over per-task channels.
//! Back-pressure flows from engine capacity to queue depth to the endpoint.

pub mod broker;
pub mod error;
pub mod http;
pub mod instance;
pub mod ring;
pub mod task;
pub mod tokenizer;
pub mod worker;

pub use broker::{Broker, DequeueRecord, QueuedTask};
pub use error::{Result, ServiceError};
pub use http::{AppState, ModelEntry};
pub use instance::{
    build_session, spawn_instance, CompletedTask, InstanceConfig, InstanceHandle, InstanceStats,
};
pub use ring::{ring_ready, RingOutcome, RingToken};
pub use task::{FinishReason, InferenceTask, Priority, StopCondition, StreamChunk, TaskEvent};
pub use tokenizer::{detokenize, generate_stub, tokenize};
pub use worker::{SequenceWorkerState, WorkerPool, WorkerStatus};
