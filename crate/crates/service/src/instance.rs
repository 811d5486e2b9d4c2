//! One LLM instance: a sequence head pulling tasks from the broker into a
//! live pipeline session, with dynamic batching, a fixed worker pool, and
//! per-token streaming back to each client.
//!
//! The instance runs as a single scheduler thread that owns the engine
//! session; all communication with the endpoint happens over the broker
//! and per-task channels. Virtual time by default; a real-time scale factor
//! paces event delivery against the wall clock for demo serving.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rackline_core::config::Scenario;
use rackline_core::engine::{LiveSession, SequenceSpec, SessionEvent, SimOptions, Trace};
use rackline_core::metrics::SequenceRecord;
use rackline_core::planner::{Deployment, MicroBatchPolicy};

use crate::broker::{Broker, QueuedTask};
use crate::error::{Result, ServiceError};
use crate::ring;
use crate::task::{FinishReason, Priority, StopCondition, StreamChunk, TaskEvent};
use crate::tokenizer::{detokenize, find_stop_step, generate_stub, tokenize};
use crate::worker::WorkerPool;

#[derive(Debug, Clone)]
pub struct InstanceConfig {
    pub model_name: String,
    pub subscriptions: Vec<Priority>,
    pub context_len: u64,
    pub default_max_new_tokens: u64,
    pub ring_configure_seconds: f64,
    pub ring_timeout_seconds: f64,
    /// `None` runs in virtual time; `Some(x)` sleeps `x` wall seconds per
    /// virtual second.
    pub real_time_scale: Option<f64>,
}

/// Service-side record of one finished task.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedTask {
    pub task_id: String,
    pub user_id: u64,
    pub worker_id: u64,
    pub priority: Priority,
    /// Timestamps as the service recorded them from its own chunk flow.
    pub t_start: f64,
    pub t_first: f64,
    pub t_end: f64,
    pub token_times: Vec<f64>,
    pub finish: FinishReason,
    pub text_tokens: u64,
    pub chunks_sent: u64,
    /// The engine's own record for the sequence, when one exists.
    pub engine_record: Option<SequenceRecord<f64>>,
}

impl CompletedTask {
    /// Service timestamps equal the engine trace values exactly.
    pub fn timestamps_coherent(&self) -> bool {
        match &self.engine_record {
            Some(r) => {
                self.t_start == r.t_start
                    && self.t_first == r.t_first
                    && self.t_end == r.t_end
                    && self.token_times == r.token_times
            }
            // degenerate zero-token stop: nothing to compare
            None => true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InstanceStats {
    pub ready_at: f64,
    pub ring_passes: u64,
    pub pool_size: u64,
    pub completed: Vec<CompletedTask>,
    pub rejected: u64,
    /// Full engine trace, populated at clean shutdown.
    pub final_trace: Option<Trace<f64>>,
}

/// Handle to a running instance thread.
pub struct InstanceHandle {
    pub model_name: String,
    stats: Arc<Mutex<InstanceStats>>,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<Result<()>>>,
}

impl InstanceHandle {
    pub fn stats(&self) -> InstanceStats {
        self.stats.lock().unwrap().clone()
    }

    pub fn completed_count(&self) -> usize {
        self.stats.lock().unwrap().completed.len()
    }

    /// Stops the scheduler thread and returns its final stats (including
    /// the engine trace when every admitted sequence completed).
    pub fn shutdown(mut self) -> Result<InstanceStats> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(join) = self.join.take() {
            join.join().map_err(|_| {
                ServiceError::InvalidRequest("instance thread panicked".into())
            })??;
        }
        let stats = self.stats.lock().unwrap().clone();
        Ok(stats)
    }
}

/// Builds a live engine session for a scenario: micro-batches of one user
/// (dynamic batching) and a capacity equal to the calibrated user limit.
pub fn build_session(
    scenario: &Scenario,
    opts: SimOptions,
) -> Result<(LiveSession<f64>, Deployment)> {
    let deployment = scenario.build_deployment()?;
    let capacity = scenario.max_users();
    if capacity == 0 {
        return Err(ServiceError::Capacity(
            "calibrated budget admits zero users at this context length".into(),
        ));
    }
    let timing = scenario.timing_model(&deployment)?;
    let policy = MicroBatchPolicy {
        micro_batch_size: 1,
        num_micro_batches: capacity,
    };
    let session = LiveSession::new(
        &deployment,
        &scenario.hardware,
        policy,
        timing,
        capacity,
        scenario.seed,
        opts,
    )?;
    Ok((session, deployment))
}

pub fn instance_config(scenario: &Scenario, real_time_scale: Option<f64>) -> InstanceConfig {
    InstanceConfig {
        model_name: scenario.bundle.model.name.clone(),
        subscriptions: Priority::all(scenario.priorities() as u8),
        context_len: scenario.workload.context_len,
        default_max_new_tokens: scenario.service.max_new_tokens,
        ring_configure_seconds: scenario.service.ring_configure_seconds,
        ring_timeout_seconds: scenario.service.ring_timeout_seconds,
        real_time_scale,
    }
}

/// Registers the scenario's model on the broker and starts the scheduler
/// thread. The instance declares itself ready only after the startup ring
/// has seen every node configured.
pub fn spawn_instance(
    broker: Arc<Broker>,
    scenario: &Scenario,
    real_time_scale: Option<f64>,
) -> Result<InstanceHandle> {
    let (session, deployment) = build_session(scenario, SimOptions::default())?;
    let cfg = instance_config(scenario, real_time_scale);
    broker.register_model(&cfg.model_name);

    let stats = Arc::new(Mutex::new(InstanceStats::default()));
    let stop = Arc::new(AtomicBool::new(false));
    let thread_stats = stats.clone();
    let thread_stop = stop.clone();
    let node_count = deployment.node_count;
    let model_name = cfg.model_name.clone();
    let join = std::thread::Builder::new()
        .name(format!("instance-{model_name}"))
        .spawn(move || run_scheduler(broker, session, node_count, cfg, thread_stats, thread_stop))
        .expect("spawn instance thread");

    Ok(InstanceHandle {
        model_name,
        stats,
        stop,
        join: Some(join),
    })
}

struct ActiveTask {
    task_id: String,
    priority: Priority,
    responder: crate::task::TaskEventSender,
    worker_id: u64,
    decode_len: u64,
    finish: FinishReason,
    chunks_sent: u64,
}

fn run_scheduler(
    broker: Arc<Broker>,
    mut session: LiveSession<f64>,
    node_count: u64,
    cfg: InstanceConfig,
    stats: Arc<Mutex<InstanceStats>>,
    stop: Arc<AtomicBool>,
) -> Result<()> {
    // all application containers configure in parallel; readiness is
    // declared by the ring
    let configure: Vec<Option<f64>> = vec![Some(cfg.ring_configure_seconds); node_count as usize];
    let ring = ring::ring_ready(&configure, 1e-3, cfg.ring_timeout_seconds)?;
    let mut pool = WorkerPool::new(session.capacity());
    {
        let mut st = stats.lock().unwrap();
        st.ready_at = ring.ready_at;
        st.ring_passes = ring.passes;
        st.pool_size = pool.size();
    }
    log::info!(
        "{}: ready after {:.3}s ({} ring passes), pool of {}",
        cfg.model_name,
        ring.ready_at,
        ring.passes,
        pool.size()
    );

    let mut active: BTreeMap<u64, ActiveTask> = BTreeMap::new();
    let wall_anchor = Instant::now();

    loop {
        // a stop request stops admissions and drains in-flight sequences
        let stopping = stop.load(Ordering::Relaxed);
        if stopping && active.is_empty() {
            break;
        }
        if !stopping {
            // dynamic batching: pull tasks while workers are free
            while pool.idle_count() > 0 {
                match broker.try_dequeue(&cfg.model_name, &cfg.subscriptions) {
                    Some(qt) => admit(qt, &cfg, &mut session, &mut pool, &mut active, &stats)?,
                    None => break,
                }
            }
        }
        match session.step()? {
            Some(SessionEvent::Token {
                user, index, time, ..
            }) => {
                if let Some(scale) = cfg.real_time_scale {
                    let target = Duration::from_secs_f64(time * scale);
                    let elapsed = wall_anchor.elapsed();
                    if target > elapsed {
                        std::thread::sleep(target - elapsed);
                    }
                }
                on_token(user, index, time, &mut pool, &mut active);
            }
            Some(SessionEvent::SequenceDone { record }) => {
                on_done(record, &mut pool, &mut active, &stats);
            }
            None => {
                debug_assert!(active.is_empty(), "idle session with active tasks");
                if stopping {
                    break;
                }
                match broker.dequeue_timeout(
                    &cfg.model_name,
                    &cfg.subscriptions,
                    Duration::from_millis(20),
                ) {
                    Some(qt) => admit(qt, &cfg, &mut session, &mut pool, &mut active, &stats)?,
                    None => continue,
                }
            }
        }
    }

    // a clean stop (no sequences in flight) yields the full engine trace
    if active.is_empty() {
        if let Ok(trace) = session.finish(None) {
            stats.lock().unwrap().final_trace = Some(trace);
        }
    }
    Ok(())
}

fn admit(
    qt: QueuedTask,
    cfg: &InstanceConfig,
    session: &mut LiveSession<f64>,
    pool: &mut WorkerPool,
    active: &mut BTreeMap<u64, ActiveTask>,
    stats: &Arc<Mutex<InstanceStats>>,
) -> Result<()> {
    let task = qt.task;
    let responder = qt.responder;
    let prompt_tokens = tokenize(&task.prompt).len().max(1) as u64;
    let max_new = if task.max_new_tokens == 0 {
        cfg.default_max_new_tokens
    } else {
        task.max_new_tokens
    };
    // the generator is a pure function of (task, step), so the finish point
    // is known at admission; a stop hit at step j yields j text tokens
    let (decode_len, finish) = match task.stop_condition {
        StopCondition::Token(stop) => match find_stop_step(&task.task_id, stop, max_new) {
            Some(step) => (step, FinishReason::Stop),
            None => (max_new, FinishReason::Length),
        },
        StopCondition::None => (max_new, FinishReason::Length),
    };

    if prompt_tokens + decode_len.max(1) > cfg.context_len {
        let _ = responder.send(TaskEvent::Rejected {
            task_id: task.task_id.clone(),
            reason: format!(
                "prompt of {prompt_tokens} tokens plus {decode_len} new tokens exceeds the \
                 {} -token context",
                cfg.context_len
            ),
        });
        stats.lock().unwrap().rejected += 1;
        return Ok(());
    }

    if decode_len == 0 {
        // stop token at step 0: terminal chunk only, no pipeline pass
        let _ = responder.send(TaskEvent::Chunk(StreamChunk {
            task_id: task.task_id.clone(),
            token_text: String::new(),
            index: 0,
            finish_reason: Some(FinishReason::Stop),
            virtual_time: session.now(),
        }));
        let now = session.now();
        stats.lock().unwrap().completed.push(CompletedTask {
            task_id: task.task_id,
            user_id: u64::MAX,
            worker_id: u64::MAX,
            priority: task.priority,
            t_start: now,
            t_first: now,
            t_end: now,
            token_times: Vec::new(),
            finish: FinishReason::Stop,
            text_tokens: 0,
            chunks_sent: 1,
            engine_record: None,
        });
        return Ok(());
    }

    let user = session.admit(
        SequenceSpec {
            prefill_len: prompt_tokens,
            decode_len,
        },
        None,
    )?;
    let worker_id = pool.bind(&task.task_id).expect("caller checked idle_count");
    active.insert(
        user,
        ActiveTask {
            task_id: task.task_id,
            priority: task.priority,
            responder,
            worker_id,
            decode_len,
            finish,
            chunks_sent: 0,
        },
    );
    Ok(())
}

fn on_token(
    user: u64,
    index: u64,
    time: f64,
    pool: &mut WorkerPool,
    active: &mut BTreeMap<u64, ActiveTask>,
) {
    let Some(a) = active.get_mut(&user) else {
        return;
    };
    let id = generate_stub(&a.task_id, index - 1);
    let is_last = index == a.decode_len;
    let finish_reason = (is_last && a.finish == FinishReason::Length).then_some(FinishReason::Length);
    let chunk = StreamChunk {
        task_id: a.task_id.clone(),
        token_text: detokenize(&[id]),
        index: index - 1,
        finish_reason,
        virtual_time: time,
    };
    a.chunks_sent += 1;
    let _ = a.responder.send(TaskEvent::Chunk(chunk));
    pool.on_token(a.worker_id, time);
}

fn on_done(
    record: SequenceRecord<f64>,
    pool: &mut WorkerPool,
    active: &mut BTreeMap<u64, ActiveTask>,
    stats: &Arc<Mutex<InstanceStats>>,
) {
    let Some(mut a) = active.remove(&record.user_id) else {
        return;
    };
    pool.postprocess(a.worker_id);
    if a.finish == FinishReason::Stop {
        a.chunks_sent += 1;
        let _ = a.responder.send(TaskEvent::Chunk(StreamChunk {
            task_id: a.task_id.clone(),
            token_text: String::new(),
            index: a.decode_len,
            finish_reason: Some(FinishReason::Stop),
            virtual_time: record.t_end,
        }));
    }
    // postprocessor: collect sequence statistics from the worker's own
    // token flow and hand the worker back to the pool
    let worker_times = pool.worker(a.worker_id).token_times.clone();
    stats.lock().unwrap().completed.push(CompletedTask {
        task_id: a.task_id,
        user_id: record.user_id,
        worker_id: a.worker_id,
        priority: a.priority,
        t_start: record.t_start,
        t_first: *worker_times.first().expect("tokens flowed"),
        t_end: *worker_times.last().expect("tokens flowed"),
        token_times: worker_times,
        finish: a.finish,
        text_tokens: a.decode_len,
        chunks_sent: a.chunks_sent,
        engine_record: Some(record),
    });
    pool.release(a.worker_id);
    debug_assert!(pool.conservation_holds());
}
