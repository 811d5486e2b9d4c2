//! Sequence worker pool: one worker per simultaneous user slot.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerStatus {
    #[default]
    Idle,
    Prefilling,
    Decoding,
    Postprocessing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceWorkerState {
    pub worker_id: u64,
    pub status: WorkerStatus,
    pub task_id: Option<String>,
    pub token_times: Vec<f64>,
}

/// Fixed pool sized to the plan's simultaneous-user capacity. A worker
/// binds at most one task at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerPool {
    workers: Vec<SequenceWorkerState>,
}

impl WorkerPool {
    pub fn new(size: u64) -> Self {
        Self {
            workers: (0..size)
                .map(|worker_id| SequenceWorkerState {
                    worker_id,
                    status: WorkerStatus::Idle,
                    task_id: None,
                    token_times: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn size(&self) -> u64 {
        self.workers.len() as u64
    }

    pub fn idle_count(&self) -> u64 {
        self.workers
            .iter()
            .filter(|w| w.status == WorkerStatus::Idle)
            .count() as u64
    }

    pub fn busy_count(&self) -> u64 {
        self.size() - self.idle_count()
    }

    /// Binds the lowest-numbered idle worker to a task.
    pub fn bind(&mut self, task_id: &str) -> Option<u64> {
        let w = self
            .workers
            .iter_mut()
            .find(|w| w.status == WorkerStatus::Idle)?;
        w.status = WorkerStatus::Prefilling;
        w.task_id = Some(task_id.to_string());
        w.token_times.clear();
        Some(w.worker_id)
    }

    pub fn on_token(&mut self, worker_id: u64, time: f64) {
        let w = &mut self.workers[worker_id as usize];
        w.status = WorkerStatus::Decoding;
        w.token_times.push(time);
    }

    pub fn postprocess(&mut self, worker_id: u64) {
        self.workers[worker_id as usize].status = WorkerStatus::Postprocessing;
    }

    /// Returns the worker to the pool.
    pub fn release(&mut self, worker_id: u64) {
        let w = &mut self.workers[worker_id as usize];
        w.status = WorkerStatus::Idle;
        w.task_id = None;
    }

    pub fn worker(&self, worker_id: u64) -> &SequenceWorkerState {
        &self.workers[worker_id as usize]
    }

    /// idle + busy always equals the pool size.
    pub fn conservation_holds(&self) -> bool {
        self.idle_count() + self.busy_count() == self.size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_release_conserve_workers() {
        let mut pool = WorkerPool::new(3);
        assert_eq!(pool.idle_count(), 3);
        let a = pool.bind("t1").unwrap();
        let b = pool.bind("t2").unwrap();
        assert_ne!(a, b);
        assert_eq!(pool.idle_count(), 1);
        assert!(pool.conservation_holds());

        pool.on_token(a, 0.5);
        assert_eq!(pool.worker(a).status, WorkerStatus::Decoding);

        pool.postprocess(a);
        pool.release(a);
        assert_eq!(pool.idle_count(), 2);
        assert!(pool.conservation_holds());
    }

    #[test]
    fn exhausted_pool_refuses_binding() {
        let mut pool = WorkerPool::new(1);
        pool.bind("t1").unwrap();
        assert!(pool.bind("t2").is_none());
    }
}
