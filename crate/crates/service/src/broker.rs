//! In-process message broker with the observable semantics of the real
//! deployment's AMQP setup: per-(model, priority) task queues, FIFO within
//! a priority, higher priorities consumed first, and a response channel per
//! task. Every dequeue is logged with the number of higher-priority tasks
//! that were waiting, so priority inversions are checkable after a run.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::task::{InferenceTask, Priority, TaskEventSender};

/// A queued task together with its response channel.
#[derive(Debug)]
pub struct QueuedTask {
    pub task: InferenceTask,
    pub responder: TaskEventSender,
}

/// One dequeue observation: how many higher-priority tasks for the same
/// model were queued at the instant the task was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DequeueRecord {
    pub task_id: String,
    pub model: String,
    pub priority: Priority,
    pub higher_priority_waiting: u64,
}

#[derive(Debug, Default)]
struct BrokerState {
    queues: BTreeMap<(String, Priority), VecDeque<QueuedTask>>,
    registered: BTreeSet<String>,
    dequeue_log: Vec<DequeueRecord>,
    submitted: u64,
    closed: bool,
}

/// The broker. Cheap to share behind an `Arc`; producers and consumers may
/// live on any thread.
#[derive(Default)]
pub struct Broker {
    state: Mutex<BrokerState>,
    available: Condvar,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares that an instance serves `model`; tasks for unregistered
    /// models are rejected at submit.
    pub fn register_model(&self, model: &str) {
        let mut st = self.state.lock().unwrap();
        st.registered.insert(model.to_string());
    }

    /// Enqueues a task. Returns its position in the (model, priority)
    /// queue, 0-based.
    pub fn submit(&self, task: InferenceTask, responder: TaskEventSender) -> Result<usize> {
        task.validate()?;
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return Err(ServiceError::QueueClosed);
        }
        if !st.registered.contains(&task.model_name) {
            return Err(ServiceError::Routing {
                model: task.model_name.clone(),
            });
        }
        let key = (task.model_name.clone(), task.priority);
        let q = st.queues.entry(key).or_default();
        q.push_back(QueuedTask { task, responder });
        let position = q.len() - 1;
        st.submitted += 1;
        drop(st);
        self.available.notify_all();
        Ok(position)
    }

    fn take_locked(
        st: &mut BrokerState,
        model: &str,
        subscriptions: &[Priority],
    ) -> Option<QueuedTask> {
        let mut subs: Vec<Priority> = subscriptions.to_vec();
        subs.sort();
        for p in &subs {
            let key = (model.to_string(), *p);
            let front = st.queues.get_mut(&key).and_then(|q| q.pop_front());
            if let Some(qt) = front {
                let higher: u64 = st
                    .queues
                    .iter()
                    .filter(|((m, q_p), _)| {
                        m == model && q_p < p && subs.contains(q_p)
                    })
                    .map(|(_, q)| q.len() as u64)
                    .sum();
                st.dequeue_log.push(DequeueRecord {
                    task_id: qt.task.task_id.clone(),
                    model: model.to_string(),
                    priority: *p,
                    higher_priority_waiting: higher,
                });
                return Some(qt);
            }
        }
        None
    }

    /// Takes the oldest task of the highest subscribed priority, without
    /// blocking.
    pub fn try_dequeue(&self, model: &str, subscriptions: &[Priority]) -> Option<QueuedTask> {
        let mut st = self.state.lock().unwrap();
        Self::take_locked(&mut st, model, subscriptions)
    }

    /// Blocking dequeue with a timeout; `None` on timeout or shutdown.
    pub fn dequeue_timeout(
        &self,
        model: &str,
        subscriptions: &[Priority],
        timeout: Duration,
    ) -> Option<QueuedTask> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(qt) = Self::take_locked(&mut st, model, subscriptions) {
                return Some(qt);
            }
            if st.closed {
                return None;
            }
            let (next, res) = self.available.wait_timeout(st, timeout).unwrap();
            st = next;
            if res.timed_out() {
                return Self::take_locked(&mut st, model, subscriptions);
            }
        }
    }

    /// Wakes all consumers and refuses further submissions.
    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.available.notify_all();
    }

    pub fn dequeue_log(&self) -> Vec<DequeueRecord> {
        self.state.lock().unwrap().dequeue_log.clone()
    }

    /// Number of dequeues that happened while a higher-priority task for
    /// the same model was waiting. Zero by construction; exposed so runs
    /// can assert it.
    pub fn priority_inversions(&self) -> u64 {
        self.state
            .lock()
            .unwrap()
            .dequeue_log
            .iter()
            .filter(|r| r.higher_priority_waiting > 0)
            .count() as u64
    }

    pub fn queued_depth(&self, model: &str) -> u64 {
        let st = self.state.lock().unwrap();
        st.queues
            .iter()
            .filter(|((m, _), _)| m == model)
            .map(|(_, q)| q.len() as u64)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::StopCondition;

    fn task(id: &str, priority: u8) -> InferenceTask {
        InferenceTask {
            task_id: id.into(),
            model_name: "m".into(),
            priority: Priority(priority),
            prompt: "hello".into(),
            max_new_tokens: 4,
            stop_condition: StopCondition::None,
            submit_time: 0.0,
        }
    }

    fn sender() -> TaskEventSender {
        tokio::sync::mpsc::unbounded_channel().0
    }

    #[test]
    fn higher_priority_dequeues_first() {
        let b = Broker::new();
        b.register_model("m");
        b.submit(task("low", 2), sender()).unwrap();
        b.submit(task("high", 0), sender()).unwrap();
        let subs = Priority::all(3);
        let first = b.try_dequeue("m", &subs).unwrap();
        assert_eq!(first.task.task_id, "high");
        let second = b.try_dequeue("m", &subs).unwrap();
        assert_eq!(second.task.task_id, "low");
        assert_eq!(b.priority_inversions(), 0);
    }

    #[test]
    fn unknown_model_is_a_routing_error() {
        let b = Broker::new();
        b.register_model("m");
        let mut t = task("x", 0);
        t.model_name = "other".into();
        assert!(matches!(
            b.submit(t, sender()),
            Err(ServiceError::Routing { .. })
        ));
    }

    #[test]
    fn same_priority_is_fifo_over_a_hundred_tasks() {
        let b = Broker::new();
        b.register_model("m");
        for i in 0..100 {
            b.submit(task(&format!("t{i}"), 1), sender()).unwrap();
        }
        let subs = Priority::all(3);
        for i in 0..100 {
            let qt = b.try_dequeue("m", &subs).unwrap();
            assert_eq!(qt.task.task_id, format!("t{i}"));
        }
    }

    #[test]
    fn subscription_subset_ignores_other_levels() {
        let b = Broker::new();
        b.register_model("m");
        b.submit(task("p0", 0), sender()).unwrap();
        b.submit(task("p2", 2), sender()).unwrap();
        // instance subscribed only to the low level
        let got = b.try_dequeue("m", &[Priority(2)]).unwrap();
        assert_eq!(got.task.task_id, "p2");
        assert_eq!(b.priority_inversions(), 0, "unsubscribed levels don't count");
    }

    #[test]
    fn submit_reports_queue_position() {
        let b = Broker::new();
        b.register_model("m");
        assert_eq!(b.submit(task("a", 1), sender()).unwrap(), 0);
        assert_eq!(b.submit(task("b", 1), sender()).unwrap(), 1);
        assert_eq!(b.submit(task("c", 0), sender()).unwrap(), 0);
    }
}
