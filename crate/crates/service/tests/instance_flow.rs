//! Instance-level serving flow: dynamic batching against the calibrated
//! deployment, stream integrity, stop conditions, and service/engine
//! timestamp coherence, all in virtual time.

use std::path::PathBuf;
use std::sync::Arc;

use rackline_core::config::Scenario;
use rackline_service::tokenizer::{find_stop_step, generate_stub};
use rackline_service::{
    spawn_instance, Broker, FinishReason, InferenceTask, Priority, StopCondition, StreamChunk,
    TaskEvent,
};

fn scenario() -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/scenarios/granite-8b-serve.toml");
    Scenario::load(&path).unwrap()
}

fn task(id: &str, priority: u8, prompt: &str, max_new: u64) -> InferenceTask {
    InferenceTask {
        task_id: id.into(),
        model_name: "granite-3.3-8b".into(),
        priority: Priority(priority),
        prompt: prompt.into(),
        max_new_tokens: max_new,
        stop_condition: StopCondition::None,
        submit_time: 0.0,
    }
}

fn collect_stream(
    rx: &mut tokio::sync::mpsc::UnboundedReceiver<TaskEvent>,
) -> Vec<StreamChunk> {
    let mut chunks = Vec::new();
    while let Some(ev) = rx.blocking_recv() {
        match ev {
            TaskEvent::Chunk(c) => {
                let done = c.finish_reason.is_some();
                chunks.push(c);
                if done {
                    break;
                }
            }
            TaskEvent::Rejected { reason, .. } => panic!("unexpected rejection: {reason}"),
        }
    }
    chunks
}

fn assert_stream_integrity(chunks: &[StreamChunk]) {
    assert!(!chunks.is_empty());
    for (i, c) in chunks.iter().enumerate() {
        assert_eq!(c.index, i as u64, "indices contiguous from 0");
    }
    let terminals = chunks.iter().filter(|c| c.finish_reason.is_some()).count();
    assert_eq!(terminals, 1, "exactly one terminal chunk");
    assert!(chunks.last().unwrap().finish_reason.is_some());
}

#[test]
fn twenty_eight_tasks_stream_concurrently_at_calibrated_itl() {
    let scenario = scenario();
    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, None).unwrap();

    let max_new = 16u64;
    let mut receivers = Vec::new();
    for i in 0..28 {
        let (tx, rx) = tokio::sync::mpsc::unbounded_channel();
        let t = task(&format!("t{i}"), (i % 3) as u8, "hello pipeline", max_new);
        broker.submit(t, tx).unwrap();
        receivers.push(rx);
    }

    let mut all_chunks = Vec::new();
    for rx in &mut receivers {
        let chunks = collect_stream(rx);
        assert_stream_integrity(&chunks);
        assert_eq!(chunks.len() as u64, max_new, "length-finished stream");
        all_chunks.push(chunks);
    }

    // all 28 decode concurrently: every stream starts before any ends
    let first_times: Vec<f64> = all_chunks.iter().map(|c| c[0].virtual_time).collect();
    let end_times: Vec<f64> = all_chunks
        .iter()
        .map(|c| c.last().unwrap().virtual_time)
        .collect();
    let latest_start = first_times.iter().cloned().fold(f64::MIN, f64::max);
    let earliest_end = end_times.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        latest_start < earliest_end,
        "streams overlap: last start {latest_start} vs first end {earliest_end}"
    );

    // per-task ITL matches the calibration target within 10%
    for chunks in &all_chunks {
        let times: Vec<f64> = chunks.iter().map(|c| c.virtual_time).collect();
        let itl = (times.last().unwrap() - times[0]) / (times.len() as f64 - 1.0);
        assert!(
            (itl - 2.8e-3).abs() / 2.8e-3 < 0.10,
            "per-task ITL {itl} vs 2.8 ms"
        );
    }

    let stats = handle.shutdown().unwrap();
    assert_eq!(stats.completed.len(), 28);
    assert_eq!(stats.pool_size, 28, "pool sized to plan capacity");
    assert!(stats.completed.iter().all(|c| c.timestamps_coherent()));
    assert_eq!(broker.priority_inversions(), 0);
    let trace = stats.final_trace.expect("clean shutdown yields trace");
    assert_eq!(trace.records.len(), 28);
}

#[test]
fn third_task_waits_for_a_free_worker() {
    // shrink the pool to 2 by raising the context (56 KiB budget tokens):
    // capacity = kv_budget / (per_token * context)
    let mut scenario = scenario();
    scenario.bundle.memory.kv_budget_bytes =
        2 * scenario.workload.context_len * scenario.bundle.kv_per_user_per_token();
    assert_eq!(scenario.max_users(), 2);

    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, None).unwrap();

    let mut receivers = Vec::new();
    for i in 0..3 {
        let (tx, rx) = tokio::sync::mpsc::unbounded_channel();
        broker
            .submit(task(&format!("t{i}"), 1, "hi", 4), tx)
            .unwrap();
        receivers.push(rx);
    }
    let streams: Vec<Vec<StreamChunk>> = receivers.iter_mut().map(collect_stream).collect();
    let third_start = streams[2][0].virtual_time;
    let earliest_end = streams[..2]
        .iter()
        .map(|s| s.last().unwrap().virtual_time)
        .fold(f64::MAX, f64::min);
    // the third stream's first token comes after a completion freed a slot
    assert!(third_start > earliest_end);
    handle.shutdown().unwrap();
}

#[test]
fn stop_token_finishes_early_with_terminal_chunk() {
    // find a task id whose stub stream first hits its step-3 token at step 3
    let mut chosen = None;
    for i in 0..200 {
        let id = format!("stop-{i}");
        let stop = generate_stub(&id, 3);
        if find_stop_step(&id, stop, 16) == Some(3) {
            chosen = Some((id, stop));
            break;
        }
    }
    let (task_id, stop) = chosen.expect("a suitable task id exists");

    let scenario = scenario();
    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, None).unwrap();

    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
    let mut t = task(&task_id, 0, "stop early", 16);
    t.stop_condition = StopCondition::Token(stop);
    broker.submit(t, tx).unwrap();

    let chunks = collect_stream(&mut rx);
    assert_stream_integrity(&chunks);
    // three text tokens, then an empty terminal chunk with reason stop
    assert_eq!(chunks.len(), 4);
    assert!(chunks[..3].iter().all(|c| !c.token_text.is_empty()));
    assert_eq!(chunks[3].token_text, "");
    assert_eq!(chunks[3].finish_reason, Some(FinishReason::Stop));
    handle.shutdown().unwrap();
}

#[test]
fn replayed_task_yields_identical_token_stream() {
    let scenario = scenario();
    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, None).unwrap();

    let mut texts = Vec::new();
    for _ in 0..2 {
        let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
        broker.submit(task("replay", 1, "same", 8), tx).unwrap();
        let chunks = collect_stream(&mut rx);
        texts.push(
            chunks
                .iter()
                .map(|c| c.token_text.clone())
                .collect::<String>(),
        );
    }
    assert_eq!(texts[0], texts[1]);
    handle.shutdown().unwrap();
}

#[test]
fn idle_instance_produces_no_events() {
    let scenario = scenario();
    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, None).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(100));
    assert_eq!(handle.completed_count(), 0);
    let stats = handle.shutdown().unwrap();
    assert!(stats.completed.is_empty());
    assert_eq!(stats.rejected, 0);
    let trace = stats.final_trace.expect("idle session still finalizes");
    assert!(trace.records.is_empty());
    assert!(trace.events.is_empty());
}

#[test]
fn oversized_prompt_is_rejected_with_capacity_status() {
    let scenario = scenario();
    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, None).unwrap();

    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
    let big_prompt = "x".repeat(4096); // tokenizes to 4096 > 2048 context
    broker
        .submit(task("big", 0, &big_prompt, 8), tx)
        .unwrap();
    match rx.blocking_recv().unwrap() {
        TaskEvent::Rejected { reason, .. } => assert!(reason.contains("context")),
        TaskEvent::Chunk(_) => panic!("expected rejection"),
    }
    let stats = handle.shutdown().unwrap();
    assert_eq!(stats.rejected, 1);
}
