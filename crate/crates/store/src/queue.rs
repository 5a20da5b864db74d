//! Lease-based job queue kept in the same database as the entities.

use std::collections::BTreeMap;

use hg_core::model::DatasetStatus;
use hg_core::{DatasetId, ErrorCode, HgError, JobId, Result, Timestamp};
use rusqlite::{OptionalExtension, Row, params};
use serde::{Deserialize, Serialize};

use crate::db::{Db, Store, db_err};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub max_retries: u32,
    pub default_lease_secs: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            default_lease_secs: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Ready,
    Leased,
    Done,
    Dead,
}

impl JobState {
    pub const ALL: [JobState; 4] = [JobState::Ready, JobState::Leased, JobState::Done, JobState::Dead];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Ready => "ready",
            JobState::Leased => "leased",
            JobState::Done => "done",
            JobState::Dead => "dead",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Dead)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: JobId,
    pub dataset_id: DatasetId,
    pub worker_kind: String,
    pub state: JobState,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease_expires_at: Option<Timestamp>,
    pub enqueued_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure { reason: String },
}

/// Job counts by state. `enqueued` equals the sum of the others.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub enqueued: u64,
    pub ready: u64,
    pub leased: u64,
    pub done: u64,
    pub dead: u64,
    #[serde(default)]
    pub by_kind: BTreeMap<String, BTreeMap<JobState, u64>>,
}

const JOB_COLS: &str =
    "job_id, dataset_id, worker_kind, state, attempts, lease_expires_at, enqueued_at, last_error";

fn job_row(r: &Row<'_>) -> rusqlite::Result<(Job, String)> {
    let state: String = r.get(3)?;
    Ok((
        Job {
            job_id: JobId::from(r.get::<_, String>(0)?),
            dataset_id: DatasetId::from(r.get::<_, String>(1)?),
            worker_kind: r.get(2)?,
            state: JobState::Ready,
            attempts: r.get(4)?,
            lease_expires_at: r.get::<_, Option<i64>>(5)?.map(Timestamp::from_millis),
            enqueued_at: Timestamp::from_millis(r.get(6)?),
            last_error: r.get(7)?,
        },
        state,
    ))
}

fn finish((mut job, state): (Job, String)) -> Result<Job> {
    job.state = JobState::parse(&state)
        .ok_or_else(|| HgError::new(ErrorCode::Corrupt, format!("job state {state:?}")))?;
    Ok(job)
}

fn lease_millis(secs: f64) -> Result<i64> {
    if !(secs.is_finite() && secs > 0.0) {
        return Err(HgError::validation("lease_secs must be positive"));
    }
    Ok((secs * 1000.0).round().max(1.0) as i64)
}

impl Db<'_> {
    pub fn get_job(&self, id: &JobId) -> Result<Option<Job>> {
        self.conn
            .query_row(&format!("SELECT {JOB_COLS} FROM jobs WHERE job_id = ?1"), [id.as_str()], job_row)
            .optional()
            .map_err(db_err)?
            .map(finish)
            .transpose()
    }

    pub fn jobs_for_dataset(&self, id: &DatasetId) -> Result<Vec<Job>> {
        self.jobs_where("dataset_id = ?1", [id.as_str()])
    }

    fn jobs_where(&self, cond: &str, p: impl rusqlite::Params) -> Result<Vec<Job>> {
        let mut stmt = self
            .conn
            .prepare_cached(&format!("SELECT {JOB_COLS} FROM jobs WHERE {cond} ORDER BY enqueued_at, seq"))
            .map_err(db_err)?;
        let rows = stmt.query_map(p, job_row).map_err(db_err)?;
        rows.map(|r| r.map_err(db_err).and_then(finish)).collect()
    }

    /// Adds a ready job, or returns the live one for the same pair.
    pub fn enqueue(&self, dataset: &DatasetId, worker_kind: &str) -> Result<Job> {
        if let Some(live) = self
            .jobs_where(
                "dataset_id = ?1 AND worker_kind = ?2 AND state IN ('ready', 'leased')",
                params![dataset.as_str(), worker_kind],
            )?
            .pop()
        {
            return Ok(live);
        }
        let job = Job {
            job_id: JobId::generate(),
            dataset_id: dataset.clone(),
            worker_kind: worker_kind.to_string(),
            state: JobState::Ready,
            attempts: 0,
            lease_expires_at: None,
            enqueued_at: self.now,
            last_error: None,
        };
        self.exec(
            "INSERT INTO jobs (job_id, dataset_id, worker_kind, state, attempts, enqueued_at, updated_at)
             VALUES (?1, ?2, ?3, 'ready', 0, ?4, ?4)",
            params![job.job_id.as_str(), dataset.as_str(), worker_kind, self.now.millis()],
        )?;
        Ok(job)
    }

    /// Returns expired leases to ready, or to dead once retries are spent.
    pub fn reap_expired(&self) -> Result<usize> {
        let now = self.now.millis();
        let dead = self.exec(
            "UPDATE jobs SET state = 'dead', lease_expires_at = NULL, updated_at = ?1,
                last_error = COALESCE(last_error, 'lease expired')
             WHERE state = 'leased' AND lease_expires_at <= ?1 AND attempts > ?2",
            params![now, self.queue.max_retries],
        )?;
        let ready = self.exec(
            "UPDATE jobs SET state = 'ready', lease_expires_at = NULL, updated_at = ?1
             WHERE state = 'leased' AND lease_expires_at <= ?1",
            params![now],
        )?;
        Ok(dead + ready)
    }

    /// Leases the oldest ready job of `worker_kind`.
    pub fn claim(&self, worker_kind: &str, lease_secs: f64) -> Result<Option<Job>> {
        let lease = lease_millis(lease_secs)?;
        self.reap_expired()?;
        let Some(mut job) = self
            .conn
            .query_row(
                &format!(
                    "SELECT {JOB_COLS} FROM jobs WHERE worker_kind = ?1 AND state = 'ready'
                     ORDER BY enqueued_at, seq LIMIT 1"
                ),
                [worker_kind],
                job_row,
            )
            .optional()
            .map_err(db_err)?
            .map(finish)
            .transpose()?
        else {
            return Ok(None);
        };
        let expires = self.now.plus_millis(lease);
        let n = self.exec(
            "UPDATE jobs SET state = 'leased', attempts = attempts + 1, lease_expires_at = ?2, updated_at = ?3
             WHERE job_id = ?1 AND state = 'ready'",
            params![job.job_id.as_str(), expires.millis(), self.now.millis()],
        )?;
        if n != 1 {
            return Ok(None);
        }
        job.state = JobState::Leased;
        job.attempts += 1;
        job.lease_expires_at = Some(expires);
        Ok(Some(job))
    }

    /// Extends a live lease held under `lease_attempts`.
    pub fn renew(&self, id: &JobId, lease_attempts: u32, lease_secs: f64) -> Result<Job> {
        let lease = lease_millis(lease_secs)?;
        self.check_lease(id, lease_attempts)?;
        self.exec(
            "UPDATE jobs SET lease_expires_at = ?2, updated_at = ?3 WHERE job_id = ?1",
            params![id.as_str(), self.now.plus_millis(lease).millis(), self.now.millis()],
        )?;
        self.get_job(id)?.ok_or_else(|| HgError::internal("job vanished"))
    }

    fn check_lease(&self, id: &JobId, lease_attempts: u32) -> Result<Job> {
        let job = self.get_job(id)?.ok_or_else(|| HgError::not_found(format!("job {id}")))?;
        let live = job.state == JobState::Leased
            && job.attempts == lease_attempts
            && job.lease_expires_at.is_some_and(|t| t > self.now);
        if !live {
            return Err(HgError::new(
                ErrorCode::StaleLease,
                format!("job {id} is not leased under attempt {lease_attempts}"),
            ));
        }
        Ok(job)
    }

    /// Settles a lease. Success marks the dataset processed.
    pub fn ack(&self, id: &JobId, lease_attempts: u32, outcome: &Outcome) -> Result<Job> {
        let job = self.check_lease(id, lease_attempts)?;
        let now = self.now.millis();
        match outcome {
            Outcome::Success => {
                self.exec(
                    "UPDATE jobs SET state = 'done', lease_expires_at = NULL, updated_at = ?2 WHERE job_id = ?1",
                    params![id.as_str(), now],
                )?;
                self.cas_dataset(&job.dataset_id, DatasetStatus::Published, DatasetStatus::Processed)?;
            }
            Outcome::Failure { reason } => {
                let next = if job.attempts <= self.queue.max_retries { "ready" } else { "dead" };
                self.exec(
                    "UPDATE jobs SET state = ?2, lease_expires_at = NULL, updated_at = ?3, last_error = ?4
                     WHERE job_id = ?1",
                    params![id.as_str(), next, now, reason],
                )?;
            }
        }
        self.get_job(id)?.ok_or_else(|| HgError::internal("job vanished"))
    }

    pub fn list_jobs(&self, state: Option<JobState>, worker_kind: Option<&str>) -> Result<Vec<Job>> {
        self.jobs_where(
            "(?1 IS NULL OR state = ?1) AND (?2 IS NULL OR worker_kind = ?2)",
            params![state.map(JobState::as_str), worker_kind],
        )
    }

    pub fn queue_stats(&self) -> Result<QueueStats> {
        let mut stats = QueueStats::default();
        let mut stmt = self
            .conn
            .prepare_cached("SELECT worker_kind, state, COUNT(*) FROM jobs GROUP BY worker_kind, state")
            .map_err(db_err)?;
        let rows = stmt
            .query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, i64>(2)?)))
            .map_err(db_err)?;
        for row in rows {
            let (kind, state, n) = row.map_err(db_err)?;
            let state = JobState::parse(&state)
                .ok_or_else(|| HgError::new(ErrorCode::Corrupt, format!("job state {state:?}")))?;
            let n = n as u64;
            *stats.by_kind.entry(kind).or_default().entry(state).or_default() += n;
            stats.enqueued += n;
            match state {
                JobState::Ready => stats.ready += n,
                JobState::Leased => stats.leased += n,
                JobState::Done => stats.done += n,
                JobState::Dead => stats.dead += n,
            }
        }
        Ok(stats)
    }
}

impl Store {
    pub fn enqueue(&self, dataset: &DatasetId, worker_kind: &str) -> Result<Job> {
        self.write(|db| db.enqueue(dataset, worker_kind))
    }

    pub fn claim(&self, worker_kind: &str, lease_secs: f64) -> Result<Option<Job>> {
        self.write(|db| db.claim(worker_kind, lease_secs))
    }

    pub fn ack(&self, id: &JobId, lease_attempts: u32, outcome: &Outcome) -> Result<Job> {
        self.write(|db| db.ack(id, lease_attempts, outcome))
    }

    pub fn queue_stats(&self) -> Result<QueueStats> {
        self.read(|db| db.queue_stats())
    }
}
