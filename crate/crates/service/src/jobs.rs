//! FIFO job queue drained by a single worker thread.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::api::Payload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Generate,
    Ssk,
    Compose,
    Pf,
    Ablate,
}

impl std::str::FromStr for JobKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "generate" => Ok(JobKind::Generate),
            "ssk" => Ok(JobKind::Ssk),
            "compose" => Ok(JobKind::Compose),
            "pf" => Ok(JobKind::Pf),
            "ablate" => Ok(JobKind::Ablate),
            other => Err(format!(
                "unknown job kind {other:?}; expected generate, ssk, compose, pf or ablate"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

/// Public view of a job. `position` is the submission ordinal (1 for the
/// first job the service accepted); the `*_seq` fields are ticks of a
/// queue-wide event counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub position: u64,
    pub payload: serde_json::Value,
    pub run_ids: Vec<String>,
    /// Per-run failures of a batch job.
    pub run_errors: Vec<String>,
    pub error: Option<String>,
    pub submitted_seq: u64,
    pub started_seq: Option<u64>,
    pub finished_seq: Option<u64>,
}

/// What running a job produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub run_ids: Vec<String>,
    pub run_errors: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub queued: usize,
    pub running: usize,
    pub finished: usize,
    pub max_running_observed: usize,
}

#[derive(Default)]
struct Inner {
    jobs: HashMap<String, Job>,
    pending: VecDeque<(String, Payload)>,
    submitted: u64,
    clock: u64,
    running: usize,
    max_running: usize,
    finished: usize,
    shutdown: bool,
}

impl Inner {
    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }
}

#[derive(Default)]
pub struct JobQueue {
    inner: Mutex<Inner>,
    work: Condvar,
    /// Woken on every status change, for long-polling readers.
    pub changed: Notify,
}

impl JobQueue {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Enqueues a validated payload; returns the job id and its position.
    pub fn submit(&self, payload: Payload, raw: serde_json::Value) -> (String, u64) {
        let job_id = uuid::Uuid::new_v4().simple().to_string();
        let mut inner = self.lock();
        inner.submitted += 1;
        let position = inner.submitted;
        let seq = inner.tick();
        inner.jobs.insert(
            job_id.clone(),
            Job {
                job_id: job_id.clone(),
                kind: payload.kind(),
                status: JobStatus::Queued,
                position,
                payload: raw,
                run_ids: Vec::new(),
                run_errors: Vec::new(),
                error: None,
                submitted_seq: seq,
                started_seq: None,
                finished_seq: None,
            },
        );
        inner.pending.push_back((job_id.clone(), payload));
        drop(inner);
        self.work.notify_one();
        (job_id, position)
    }

    pub fn get(&self, job_id: &str) -> Option<Job> {
        self.lock().jobs.get(job_id).cloned()
    }

    pub fn stats(&self) -> QueueStats {
        let inner = self.lock();
        QueueStats {
            queued: inner.pending.len(),
            running: inner.running,
            finished: inner.finished,
            max_running_observed: inner.max_running,
        }
    }

    pub fn shutdown(&self) {
        self.lock().shutdown = true;
        self.work.notify_all();
    }

    fn next(&self) -> Option<(String, Payload)> {
        let mut inner = self.lock();
        loop {
            if inner.shutdown {
                return None;
            }
            if let Some((id, payload)) = inner.pending.pop_front() {
                let seq = inner.tick();
                inner.running += 1;
                inner.max_running = inner.max_running.max(inner.running);
                if let Some(job) = inner.jobs.get_mut(&id) {
                    job.status = JobStatus::Running;
                    job.started_seq = Some(seq);
                }
                drop(inner);
                self.changed.notify_waiters();
                return Some((id, payload));
            }
            inner = self.work.wait(inner).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn complete(&self, job_id: &str, outcome: Outcome) {
        let mut inner = self.lock();
        let seq = inner.tick();
        inner.running -= 1;
        inner.finished += 1;
        if let Some(job) = inner.jobs.get_mut(job_id) {
            job.status = if outcome.error.is_some() {
                JobStatus::Failed
            } else {
                JobStatus::Done
            };
            job.run_ids = outcome.run_ids;
            job.run_errors = outcome.run_errors;
            job.error = outcome.error;
            job.finished_seq = Some(seq);
        }
        drop(inner);
        self.changed.notify_waiters();
    }

    /// Drains the queue on the current thread until [`JobQueue::shutdown`].
    pub fn work_loop(&self, mut execute: impl FnMut(&Payload) -> Outcome) {
        while let Some((id, payload)) = self.next() {
            let outcome = catch_unwind(AssertUnwindSafe(|| execute(&payload))).unwrap_or_else(|panic| {
                let message = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "job panicked".into());
                Outcome {
                    error: Some(message),
                    ..Outcome::default()
                }
            });
            self.complete(&id, outcome);
        }
    }
}
