//! Enrollment jobs and their single-file store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use trace_auth::harness::TrainRunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_active(self) -> bool {
        matches!(self, JobState::Queued | JobState::Running)
    }

    /// Allowed moves: queued → running → done | failed.
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentJob {
    pub job_id: String,
    pub participant_id: String,
    pub state: JobState,
    /// Last completed epoch.
    pub epoch: usize,
    pub max_epochs: usize,
    pub config: TrainRunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, thiserror::Error)]
pub enum JobStoreError {
    #[error("job store {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("participant `{participant}` already has active job `{job_id}`")]
    Active { participant: String, job_id: String },
    #[error("job `{0}` not found")]
    Unknown(String),
    #[error("job `{job_id}` cannot move from {from:?} to {to:?}")]
    Transition { job_id: String, from: JobState, to: JobState },
}

/// All jobs, kept in memory and rewritten to one JSON file on every change.
#[derive(Debug)]
pub struct JobStore {
    path: PathBuf,
    jobs: Mutex<BTreeMap<String, EnrollmentJob>>,
}

impl JobStore {
    /// Opens or creates the store. Jobs left running by a previous process
    /// are marked failed; queued ones are returned for re-submission.
    pub fn open(path: &Path) -> Result<(JobStore, Vec<String>), JobStoreError> {
        let io = |e: std::io::Error| JobStoreError::Io { path: path.to_path_buf(), reason: e.to_string() };
        let mut jobs: BTreeMap<String, EnrollmentJob> = match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice::<Vec<EnrollmentJob>>(&bytes)
                .map_err(|e| JobStoreError::Io { path: path.to_path_buf(), reason: e.to_string() })?
                .into_iter()
                .map(|j| (j.job_id.clone(), j))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(io(e)),
        };
        let mut requeue = Vec::new();
        for job in jobs.values_mut() {
            match job.state {
                JobState::Running => {
                    job.state = JobState::Failed;
                    job.error = Some("interrupted by service restart".into());
                    job.updated_ms = now_ms();
                }
                JobState::Queued => requeue.push(job.job_id.clone()),
                _ => {}
            }
        }
        requeue.sort_by_key(|id| jobs[id].created_ms);
        let store = JobStore { path: path.to_path_buf(), jobs: Mutex::new(jobs) };
        store.persist(&store.jobs.lock().unwrap())?;
        Ok((store, requeue))
    }

    fn persist(&self, jobs: &BTreeMap<String, EnrollmentJob>) -> Result<(), JobStoreError> {
        let io = |e: std::io::Error| JobStoreError::Io { path: self.path.clone(), reason: e.to_string() };
        let list: Vec<&EnrollmentJob> = jobs.values().collect();
        let tmp = self.path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&list).expect("jobs serialize")).map_err(io)?;
        std::fs::rename(&tmp, &self.path).map_err(io)
    }

    /// Queues a job unless the participant already has an active one.
    pub fn create(&self, participant: &str, config: TrainRunConfig) -> Result<EnrollmentJob, JobStoreError> {
        let mut jobs = self.jobs.lock().unwrap();
        if let Some(active) = jobs.values().find(|j| j.participant_id == participant && j.state.is_active()) {
            return Err(JobStoreError::Active { participant: participant.to_string(), job_id: active.job_id.clone() });
        }
        let now = now_ms();
        let job = EnrollmentJob {
            job_id: uuid::Uuid::new_v4().to_string(),
            participant_id: participant.to_string(),
            state: JobState::Queued,
            epoch: 0,
            max_epochs: config.max_epochs,
            config,
            model_id: None,
            error: None,
            created_ms: now,
            updated_ms: now,
        };
        jobs.insert(job.job_id.clone(), job.clone());
        self.persist(&jobs)?;
        Ok(job)
    }

    pub fn get(&self, job_id: &str) -> Option<EnrollmentJob> {
        self.jobs.lock().unwrap().get(job_id).cloned()
    }

    pub fn list(&self) -> Vec<EnrollmentJob> {
        self.jobs.lock().unwrap().values().cloned().collect()
    }

    fn update(&self, job_id: &str, f: impl FnOnce(&mut EnrollmentJob) -> Result<(), JobStoreError>) -> Result<EnrollmentJob, JobStoreError> {
        let mut jobs = self.jobs.lock().unwrap();
        let job = jobs.get_mut(job_id).ok_or_else(|| JobStoreError::Unknown(job_id.to_string()))?;
        f(job)?;
        job.updated_ms = now_ms();
        let out = job.clone();
        self.persist(&jobs)?;
        Ok(out)
    }

    pub fn transition(&self, job_id: &str, to: JobState) -> Result<EnrollmentJob, JobStoreError> {
        self.update(job_id, |j| {
            if !j.state.can_become(to) {
                return Err(JobStoreError::Transition { job_id: j.job_id.clone(), from: j.state, to });
            }
            j.state = to;
            Ok(())
        })
    }

    pub fn progress(&self, job_id: &str, epoch: usize) -> Result<EnrollmentJob, JobStoreError> {
        self.update(job_id, |j| {
            j.epoch = epoch;
            Ok(())
        })
    }

    pub fn finish(&self, job_id: &str, model_id: String) -> Result<EnrollmentJob, JobStoreError> {
        self.update(job_id, |j| {
            if !j.state.can_become(JobState::Done) {
                return Err(JobStoreError::Transition { job_id: j.job_id.clone(), from: j.state, to: JobState::Done });
            }
            j.state = JobState::Done;
            j.model_id = Some(model_id);
            Ok(())
        })
    }

    pub fn fail(&self, job_id: &str, error: String) -> Result<EnrollmentJob, JobStoreError> {
        self.update(job_id, |j| {
            if !j.state.can_become(JobState::Failed) {
                return Err(JobStoreError::Transition { job_id: j.job_id.clone(), from: j.state, to: JobState::Failed });
            }
            j.state = JobState::Failed;
            j.error = Some(error);
            Ok(())
        })
    }
}
