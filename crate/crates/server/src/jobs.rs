use std::collections::BTreeMap;
use std::sync::Mutex;

use cnnprune::finetune::ProgressSnapshot;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Prune,
    AutoPrune,
    Profile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
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

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    /// Auto-prune iteration, starting at 1.
    pub iteration: usize,
    pub epoch: usize,
    pub mean_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: u64,
    pub kind: JobKind,
    pub target: u64,
    pub status: JobStatus,
    pub progress: JobProgress,
    pub result: Vec<u64>,
    pub error: Option<String>,
}

/// Job table plus the single-writer slot.
#[derive(Debug, Default)]
pub struct Jobs {
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    jobs: BTreeMap<u64, Job>,
    next_id: u64,
    active: Option<u64>,
}

impl Jobs {
    /// Registers a queued job, or `None` while another job holds the slot.
    pub fn try_start(&self, kind: JobKind, target: u64) -> Option<u64> {
        let mut g = self.inner.lock().expect("jobs lock");
        if g.active.is_some() {
            return None;
        }
        g.next_id += 1;
        let id = g.next_id;
        g.active = Some(id);
        g.jobs.insert(
            id,
            Job {
                job_id: id,
                kind,
                target,
                status: JobStatus::Queued,
                progress: JobProgress::default(),
                result: Vec::new(),
                error: None,
            },
        );
        Some(id)
    }

    pub fn get(&self, id: u64) -> Option<Job> {
        self.inner.lock().expect("jobs lock").jobs.get(&id).cloned()
    }

    pub fn is_busy(&self) -> bool {
        self.inner.lock().expect("jobs lock").active.is_some()
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut Job)) {
        let mut g = self.inner.lock().expect("jobs lock");
        if let Some(job) = g.jobs.get_mut(&id) {
            if !job.status.is_terminal() {
                f(job);
            }
        }
    }

    pub fn running(&self, id: u64) {
        self.update(id, |j| j.status = JobStatus::Running);
    }

    pub fn snapshot(&self, id: u64, iteration: usize, s: &ProgressSnapshot) {
        self.update(id, |j| {
            j.progress = JobProgress {
                iteration,
                epoch: s.epoch,
                mean_loss: Some(s.mean_loss),
                test_accuracy: Some(s.test_accuracy),
            }
        });
    }

    pub fn iteration(&self, id: u64, iteration: usize) {
        self.update(id, |j| {
            j.progress = JobProgress {
                iteration,
                ..Default::default()
            }
        });
    }

    pub fn push_result(&self, id: u64, node: u64) {
        self.update(id, |j| j.result.push(node));
    }

    /// Moves the job to a terminal state and frees the writer slot.
    pub fn finish(&self, id: u64, error: Option<String>) {
        let mut g = self.inner.lock().expect("jobs lock");
        if let Some(job) = g.jobs.get_mut(&id) {
            if !job.status.is_terminal() {
                job.status = if error.is_some() { JobStatus::Failed } else { JobStatus::Done };
                job.error = error;
            }
        }
        if g.active == Some(id) {
            g.active = None;
        }
    }
}
