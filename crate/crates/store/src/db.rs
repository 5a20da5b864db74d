use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use hg_core::{Clock, ErrorCode, HgError, Result, SystemClock, Timestamp};
use rusqlite::{Connection, OptionalExtension, TransactionBehavior};
use serde::Serialize;
use serde::de::DeserializeOwned;

use crate::objects::{MemObjectStore, ObjectStore};
use crate::queue::QueueConfig;

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS studies (
    study_id   TEXT PRIMARY KEY,
    name       TEXT NOT NULL UNIQUE,
    salt       BLOB NOT NULL,
    doc        TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS credentials (
    token_hash TEXT PRIMARY KEY,
    role       TEXT NOT NULL,
    study_id   TEXT,
    subject_id TEXT,
    device_id  TEXT,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS subjects (
    subject_id TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    device_id  TEXT UNIQUE,
    doc        TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS subjects_study ON subjects(study_id);
CREATE TABLE IF NOT EXISTS vault (
    study_id   TEXT NOT NULL,
    raw_id     TEXT NOT NULL,
    subject_id TEXT NOT NULL UNIQUE,
    PRIMARY KEY (study_id, raw_id)
);
CREATE TABLE IF NOT EXISTS cohorts (
    cohort_id  TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    name       TEXT NOT NULL,
    doc        TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS cohorts_study ON cohorts(study_id, name);
CREATE TABLE IF NOT EXISTS testsets (
    testset_id TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    name       TEXT NOT NULL,
    doc        TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS testsets_study ON testsets(study_id, name);
CREATE TABLE IF NOT EXISTS tests (
    test_id    TEXT PRIMARY KEY,
    testset_id TEXT NOT NULL,
    study_id   TEXT NOT NULL,
    kind       TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS tasks (
    task_id    TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    mode       TEXT NOT NULL,
    doc        TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS tasks_mode ON tasks(mode);
CREATE TABLE IF NOT EXISTS occurrences (
    occurrence_id TEXT PRIMARY KEY,
    task_id       TEXT NOT NULL,
    study_id      TEXT NOT NULL,
    subject_id    TEXT NOT NULL,
    slot_date     TEXT NOT NULL,
    window_start  INTEGER NOT NULL,
    window_end    INTEGER NOT NULL,
    status        TEXT NOT NULL,
    UNIQUE (task_id, subject_id, slot_date)
);
CREATE INDEX IF NOT EXISTS occurrences_subject ON occurrences(subject_id, status);
CREATE INDEX IF NOT EXISTS occurrences_open ON occurrences(status, window_end);
CREATE TABLE IF NOT EXISTS datasets (
    dataset_id TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    testset_id TEXT NOT NULL,
    test_id    TEXT NOT NULL,
    test_kind  TEXT NOT NULL,
    day        TEXT NOT NULL,
    status     TEXT NOT NULL
);
CREATE UNIQUE INDEX IF NOT EXISTS datasets_one_open ON datasets(test_id, day) WHERE status = 'open';
CREATE INDEX IF NOT EXISTS datasets_status ON datasets(status, day);
CREATE TABLE IF NOT EXISTS datapoints (
    datapoint_id    TEXT PRIMARY KEY,
    study_id        TEXT NOT NULL,
    subject_id      TEXT NOT NULL,
    occurrence_id   TEXT NOT NULL,
    test_id         TEXT NOT NULL,
    idempotency_key TEXT NOT NULL,
    dataset_id      TEXT NOT NULL,
    doc             TEXT NOT NULL,
    UNIQUE (occurrence_id, test_id, idempotency_key)
);
CREATE INDEX IF NOT EXISTS datapoints_dataset ON datapoints(dataset_id);
CREATE INDEX IF NOT EXISTS datapoints_study ON datapoints(study_id);
CREATE TABLE IF NOT EXISTS results (
    result_id    TEXT PRIMARY KEY,
    study_id     TEXT NOT NULL,
    subject_id   TEXT NOT NULL,
    dataset_id   TEXT,
    datapoint_id TEXT,
    test_id      TEXT,
    worker_kind  TEXT NOT NULL,
    produced_at  INTEGER NOT NULL,
    doc          TEXT NOT NULL
);
CREATE UNIQUE INDEX IF NOT EXISTS results_one_per_datapoint ON results(datapoint_id, worker_kind);
CREATE INDEX IF NOT EXISTS results_study ON results(study_id, produced_at);
CREATE TABLE IF NOT EXISTS rules (
    rule_id    TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    name       TEXT NOT NULL,
    doc        TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS rule_runs (
    rule_id    TEXT NOT NULL,
    day        TEXT NOT NULL,
    ran_at     INTEGER NOT NULL,
    cohort_id  TEXT,
    task_id    TEXT,
    matched    INTEGER NOT NULL,
    PRIMARY KEY (rule_id, day)
);
CREATE TABLE IF NOT EXISTS jobs (
    seq              INTEGER PRIMARY KEY AUTOINCREMENT,
    job_id           TEXT NOT NULL UNIQUE,
    dataset_id       TEXT NOT NULL,
    worker_kind      TEXT NOT NULL,
    state            TEXT NOT NULL,
    attempts         INTEGER NOT NULL,
    lease_expires_at INTEGER,
    enqueued_at      INTEGER NOT NULL,
    updated_at       INTEGER NOT NULL,
    last_error       TEXT
);
CREATE UNIQUE INDEX IF NOT EXISTS jobs_one_live ON jobs(dataset_id, worker_kind) WHERE state IN ('ready', 'leased');
CREATE INDEX IF NOT EXISTS jobs_ready ON jobs(worker_kind, state, enqueued_at, seq);
"#;

pub(crate) fn db_err(e: rusqlite::Error) -> HgError {
    match &e {
        rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation => {
            HgError::conflict(e.to_string())
        }
        _ => HgError::internal(format!("store: {e}")),
    }
}

pub(crate) fn to_doc<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(HgError::internal)
}

pub(crate) fn from_doc<T: DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| HgError::new(ErrorCode::Corrupt, format!("stored document: {e}")))
}

pub(crate) fn parse_date(s: &str) -> Result<NaiveDate> {
    s.parse()
        .map_err(|e| HgError::new(ErrorCode::Corrupt, format!("stored date {s:?}: {e}")))
}

/// The relational store plus its blob store and clock.
pub struct Store {
    conn: Mutex<Connection>,
    objects: Arc<dyn ObjectStore>,
    clock: Arc<dyn Clock>,
    queue: QueueConfig,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("queue", &self.queue).finish_non_exhaustive()
    }
}

impl Store {
    pub fn open(path: impl AsRef<Path>, objects: Arc<dyn ObjectStore>, clock: Arc<dyn Clock>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HgError::internal(format!("{}: {e}", dir.display())))?;
        }
        let conn = Connection::open(path).map_err(db_err)?;
        conn.pragma_update(None, "journal_mode", "WAL").map_err(db_err)?;
        conn.pragma_update(None, "synchronous", "NORMAL").map_err(db_err)?;
        Self::init(conn, objects, clock)
    }

    pub fn open_in_memory(clock: Arc<dyn Clock>) -> Self {
        let conn = Connection::open_in_memory().expect("in-memory sqlite");
        Self::init(conn, Arc::new(MemObjectStore::new()), clock).expect("schema applies")
    }

    pub fn memory() -> Self {
        Self::open_in_memory(Arc::new(SystemClock))
    }

    fn init(conn: Connection, objects: Arc<dyn ObjectStore>, clock: Arc<dyn Clock>) -> Result<Self> {
        conn.busy_timeout(std::time::Duration::from_secs(10)).map_err(db_err)?;
        conn.execute_batch(SCHEMA).map_err(db_err)?;
        Ok(Self {
            conn: Mutex::new(conn),
            objects,
            clock,
            queue: QueueConfig::default(),
        })
    }

    pub fn with_queue_config(mut self, cfg: QueueConfig) -> Self {
        self.queue = cfg;
        self
    }

    pub fn queue_config(&self) -> QueueConfig {
        self.queue
    }

    pub fn objects(&self) -> &Arc<dyn ObjectStore> {
        &self.objects
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Runs `f` inside one immediate transaction; an error rolls back.
    pub fn write<T>(&self, f: impl FnOnce(&Db<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(db_err)?;
        let out = f(&Db {
            conn: &tx,
            now: self.clock.now(),
            queue: self.queue,
        })?;
        tx.commit().map_err(db_err)?;
        Ok(out)
    }

    pub fn read<T>(&self, f: impl FnOnce(&Db<'_>) -> Result<T>) -> Result<T> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        f(&Db {
            conn: &conn,
            now: self.clock.now(),
            queue: self.queue,
        })
    }
}

/// Handle passed to [`Store::write`] and [`Store::read`] closures. `now` is
/// read once per transaction.
pub struct Db<'a> {
    pub(crate) conn: &'a Connection,
    pub now: Timestamp,
    pub(crate) queue: QueueConfig,
}

impl Db<'_> {
    pub(crate) fn doc<T: DeserializeOwned>(&self, sql: &str, params: impl rusqlite::Params) -> Result<Option<T>> {
        let s: Option<String> = self
            .conn
            .query_row(sql, params, |r| r.get(0))
            .optional()
            .map_err(db_err)?;
        s.as_deref().map(from_doc).transpose()
    }

    pub(crate) fn docs<T: DeserializeOwned>(&self, sql: &str, params: impl rusqlite::Params) -> Result<Vec<T>> {
        let mut stmt = self.conn.prepare_cached(sql).map_err(db_err)?;
        let rows = stmt
            .query_map(params, |r| r.get::<_, String>(0))
            .map_err(db_err)?;
        let mut out = Vec::new();
        for row in rows {
            out.push(from_doc(&row.map_err(db_err)?)?);
        }
        Ok(out)
    }

    pub(crate) fn exec(&self, sql: &str, params: impl rusqlite::Params) -> Result<usize> {
        self.conn
            .prepare_cached(sql)
            .and_then(|mut s| s.execute(params))
            .map_err(db_err)
    }

    pub(crate) fn count(&self, sql: &str, params: impl rusqlite::Params) -> Result<u64> {
        self.conn
            .query_row(sql, params, |r| r.get::<_, i64>(0))
            .map(|n| n as u64)
            .map_err(db_err)
    }
}
