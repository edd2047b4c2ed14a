//! Labelers and the state shared between a trainer and the labeling service.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::env::{Point, Trajectory};
use crate::error::{Error, Result};
use crate::feedback::{LabelRecord, LabelSource, ScriptedLabeler, SharedLabelStore, MAX_ORACLE_GRADE};
use crate::harness::metrics::{Answer, MetricRow};

pub const DEFAULT_HUMAN_BATCH: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingEpisode {
    pub episode_id: u64,
    pub timestep: u64,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub timestep: u64,
    pub waiting_for_labels: bool,
    pub n_labels: usize,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeSubmission {
    pub episode_id: u64,
    pub grade: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("episode {episode_id}: grade {grade} outside 1..=5")]
    InvalidGrade { episode_id: u64, grade: u8 },
    #[error("episode {0} is not awaiting a label")]
    UnknownEpisode(u64),
    #[error("episode {0} is already labeled")]
    Duplicate(u64),
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().expect("run state lock poisoned")
}

/// Live state of one run. The trainer writes it; the service reads it and
/// feeds human labels back in.
#[derive(Debug, Default)]
pub struct RunHandle {
    store: SharedLabelStore,
    pending: Mutex<Vec<PendingEpisode>>,
    labels_arrived: Condvar,
    status: Mutex<RunStatus>,
    metrics: Mutex<Vec<MetricRow>>,
    answers: Mutex<Vec<Answer>>,
    cancelled: AtomicBool,
}

impl RunHandle {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn store(&self) -> &SharedLabelStore {
        &self.store
    }

    pub fn pending(&self) -> Vec<PendingEpisode> {
        lock(&self.pending).clone()
    }

    pub fn status(&self) -> RunStatus {
        let mut s = lock(&self.status).clone();
        s.n_labels = self.store.len();
        s
    }

    pub fn metrics(&self) -> Vec<MetricRow> {
        lock(&self.metrics).clone()
    }

    pub fn answers(&self) -> Vec<Answer> {
        lock(&self.answers).clone()
    }

    pub fn set_timestep(&self, timestep: u64) {
        lock(&self.status).timestep = timestep;
    }

    pub fn set_finished(&self) {
        lock(&self.status).finished = true;
    }

    pub fn push_metrics(&self, row: MetricRow, answers: Vec<Answer>) {
        lock(&self.metrics).push(row);
        *lock(&self.answers) = answers;
    }

    /// Wakes any blocked trainer and makes it stop with [`Error::Cancelled`].
    pub fn cancel(&self) {
        self.cancelled.store(true, Ordering::SeqCst);
        let _guard = lock(&self.pending);
        self.labels_arrived.notify_all();
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled.load(Ordering::SeqCst)
    }

    fn enqueue(&self, episode: PendingEpisode) {
        lock(&self.pending).push(episode);
    }

    /// Blocks while at least `limit` episodes await labels.
    fn wait_below(&self, limit: usize) -> Result<()> {
        let mut pending = lock(&self.pending);
        if pending.len() < limit {
            return Ok(());
        }
        lock(&self.status).waiting_for_labels = true;
        log::info!("waiting for {} human labels", pending.len());
        while pending.len() >= limit && !self.is_cancelled() {
            pending = self
                .labels_arrived
                .wait(pending)
                .expect("run state lock poisoned");
        }
        lock(&self.status).waiting_for_labels = false;
        if self.is_cancelled() {
            return Err(Error::Cancelled);
        }
        Ok(())
    }

    /// Validates all submissions, then stores them together and removes them
    /// from the pending queue. Nothing changes on error.
    pub fn submit_labels(&self, submissions: &[GradeSubmission]) -> std::result::Result<usize, SubmitError> {
        let mut pending = lock(&self.pending);
        let mut seen = HashSet::new();
        let mut records = Vec::with_capacity(submissions.len());
        for s in submissions {
            if !(1..=MAX_ORACLE_GRADE).contains(&s.grade) {
                return Err(SubmitError::InvalidGrade {
                    episode_id: s.episode_id,
                    grade: s.grade,
                });
            }
            if self.store.contains(s.episode_id) || !seen.insert(s.episode_id) {
                return Err(SubmitError::Duplicate(s.episode_id));
            }
            let ep = pending
                .iter()
                .find(|p| p.episode_id == s.episode_id)
                .ok_or(SubmitError::UnknownEpisode(s.episode_id))?;
            records.push(LabelRecord {
                episode_id: s.episode_id,
                final_position: ep.trajectory.final_position(),
                grade: s.grade,
                source: LabelSource::Human,
                timestep: lock(&self.status).timestep,
            });
        }
        self.store
            .append_all(records)
            .map_err(|_| SubmitError::Duplicate(submissions[0].episode_id))?;
        pending.retain(|p| !seen.contains(&p.episode_id));
        self.labels_arrived.notify_all();
        Ok(submissions.len())
    }
}

/// Receives every finished episode of a run.
pub trait Labeler {
    /// May block, as the human labeler does when its queue is full.
    fn submit(&mut self, episode_id: u64, trajectory: &Trajectory, timestep: u64) -> Result<()>;
}

/// Grades episodes immediately with a scripted oracle.
pub struct ScriptedSink {
    labeler: ScriptedLabeler,
    goals: Vec<Point>,
    store: SharedLabelStore,
}

impl ScriptedSink {
    pub fn new(labeler: ScriptedLabeler, goals: Vec<Point>, store: SharedLabelStore) -> Self {
        ScriptedSink { labeler, goals, store }
    }
}

impl Labeler for ScriptedSink {
    fn submit(&mut self, episode_id: u64, trajectory: &Trajectory, timestep: u64) -> Result<()> {
        let p = trajectory.final_position();
        self.store.append(LabelRecord {
            episode_id,
            final_position: p,
            grade: self.labeler.grade(p, &self.goals),
            source: self.labeler.source(),
            timestep,
        })?;
        Ok(())
    }
}

/// Queues episodes for a person and pauses the run when `batch_size` are waiting.
pub struct HumanLabeler {
    handle: Arc<RunHandle>,
    batch_size: usize,
}

impl HumanLabeler {
    pub fn new(handle: Arc<RunHandle>, batch_size: usize) -> Self {
        HumanLabeler {
            handle,
            batch_size: batch_size.max(1),
        }
    }
}

impl Labeler for HumanLabeler {
    fn submit(&mut self, episode_id: u64, trajectory: &Trajectory, timestep: u64) -> Result<()> {
        if self.handle.is_cancelled() {
            return Err(Error::Cancelled);
        }
        self.handle.enqueue(PendingEpisode {
            episode_id,
            timestep,
            trajectory: trajectory.clone(),
        });
        self.handle.wait_below(self.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Action, EnvConfig, DEFAULT_GOALS};
    use std::thread;
    use std::time::Duration;

    fn trajectory(env: &EnvConfig, a: Action) -> Trajectory {
        let mut tr = Trajectory::start(env.reset());
        for _ in 0..env.horizon {
            let next = env.step(tr.final_state(), a).unwrap();
            tr.push(a, next);
        }
        tr
    }

    #[test]
    fn scripted_sink_labels_immediately() {
        let env = EnvConfig::default();
        let store = SharedLabelStore::new();
        let mut sink = ScriptedSink::new(ScriptedLabeler::noisy(), DEFAULT_GOALS.to_vec(), store.clone());
        let tr = trajectory(&env, Action::new(7.0 / 12.0, 10.0 / 12.0));
        sink.submit(3, &tr, 12).unwrap();
        let recs = store.snapshot();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].grade, 6);
        assert_eq!(recs[0].source, LabelSource::NoisyOracle);
        assert!(sink.submit(3, &tr, 24).is_err());
    }

    #[test]
    fn submission_errors_leave_state_unchanged() {
        let env = EnvConfig::default();
        let handle = RunHandle::new();
        for id in 0..3 {
            handle.enqueue(PendingEpisode {
                episode_id: id,
                timestep: 0,
                trajectory: trajectory(&env, Action::new(0.5, 0.5)),
            });
        }
        let sub = |episode_id, grade| GradeSubmission { episode_id, grade };
        assert_eq!(
            handle.submit_labels(&[sub(0, 3), sub(1, 6)]),
            Err(SubmitError::InvalidGrade { episode_id: 1, grade: 6 })
        );
        assert_eq!(handle.submit_labels(&[sub(0, 0)]).unwrap_err(), SubmitError::InvalidGrade { episode_id: 0, grade: 0 });
        assert_eq!(handle.submit_labels(&[sub(99, 3)]), Err(SubmitError::UnknownEpisode(99)));
        assert_eq!(handle.submit_labels(&[sub(0, 3), sub(0, 4)]), Err(SubmitError::Duplicate(0)));
        assert_eq!(handle.store().len(), 0);
        assert_eq!(handle.pending().len(), 3);

        assert_eq!(handle.submit_labels(&[sub(0, 3), sub(2, 5)]), Ok(2));
        assert_eq!(handle.store().len(), 2);
        assert_eq!(handle.pending().iter().map(|p| p.episode_id).collect::<Vec<_>>(), vec![1]);
        assert_eq!(handle.submit_labels(&[sub(0, 3)]), Err(SubmitError::Duplicate(0)));
        assert_eq!(handle.store().len(), 2);
    }

    #[test]
    fn human_labeler_blocks_until_batch_labeled() {
        let env = EnvConfig::default();
        let handle = RunHandle::new();
        let tr = trajectory(&env, Action::new(0.5, 0.5));
        let worker = {
            let handle = handle.clone();
            thread::spawn(move || {
                let mut labeler = HumanLabeler::new(handle, 3);
                for id in 0..3 {
                    labeler.submit(id, &tr, 12 * (id + 1)).unwrap();
                }
            })
        };
        while !handle.status().waiting_for_labels {
            thread::sleep(Duration::from_millis(1));
        }
        assert_eq!(handle.pending().len(), 3);
        assert!(!worker.is_finished());
        let subs: Vec<_> = (0..3).map(|id| GradeSubmission { episode_id: id, grade: 2 }).collect();
        assert_eq!(handle.submit_labels(&subs), Ok(3));
        worker.join().unwrap();
        let status = handle.status();
        assert!(!status.waiting_for_labels);
        assert_eq!(status.n_labels, 3);
        assert!(handle.pending().is_empty());
    }

    #[test]
    fn cancel_unblocks_waiting_trainer() {
        let env = EnvConfig::default();
        let handle = RunHandle::new();
        let tr = trajectory(&env, Action::new(0.5, 0.5));
        let worker = {
            let handle = handle.clone();
            thread::spawn(move || HumanLabeler::new(handle, 1).submit(0, &tr, 12))
        };
        while !handle.status().waiting_for_labels {
            thread::sleep(Duration::from_millis(1));
        }
        handle.cancel();
        assert!(matches!(worker.join().unwrap(), Err(Error::Cancelled)));
    }
}
