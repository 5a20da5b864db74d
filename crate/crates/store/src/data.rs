//! Datapoints, datasets, ingest and publishing.

use base64::Engine;
use chrono::NaiveDate;
use hg_core::model::{
    Datapoint, Dataset, DatasetStatus, OccurrenceStatus, Payload, TaskOccurrence, TestKind,
};
use hg_core::payload::{AccelDocument, Phq8Document, PoseDocument, UploadEnvelope, UploadPayload};
use hg_core::{
    DatapointId, DatasetId, ErrorCode, HgError, OccurrenceId, Result, StudyId, SubjectId, TestId,
    TestSetId, Timestamp,
};
use rusqlite::{OptionalExtension, params};
use serde::{Deserialize, Serialize};

use crate::db::{Db, Store, db_err, parse_date, to_doc};
use crate::queue::Job;

/// Outcome of an upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub datapoint: Datapoint,
    pub dataset_id: DatasetId,
    /// False when the idempotency key matched an earlier upload.
    pub created: bool,
    pub occurrence_status: OccurrenceStatus,
}

impl Db<'_> {
    pub fn get_datapoint(&self, id: &DatapointId) -> Result<Option<Datapoint>> {
        self.doc("SELECT doc FROM datapoints WHERE datapoint_id = ?1", [id.as_str()])
    }

    pub fn find_datapoint(&self, occ: &OccurrenceId, test: &TestId, key: &str) -> Result<Option<(Datapoint, DatasetId)>> {
        let row: Option<(String, String)> = self
            .conn
            .query_row(
                "SELECT doc, dataset_id FROM datapoints WHERE occurrence_id = ?1 AND test_id = ?2 AND idempotency_key = ?3",
                params![occ.as_str(), test.as_str(), key],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()
            .map_err(db_err)?;
        row.map(|(doc, ds)| Ok((crate::db::from_doc(&doc)?, DatasetId::from(ds))))
            .transpose()
    }

    pub fn list_datapoints(&self, study: &StudyId) -> Result<Vec<Datapoint>> {
        self.docs("SELECT doc FROM datapoints WHERE study_id = ?1 ORDER BY rowid", [study.as_str()])
    }

    pub fn dataset_datapoints(&self, id: &DatasetId) -> Result<Vec<Datapoint>> {
        self.docs("SELECT doc FROM datapoints WHERE dataset_id = ?1 ORDER BY rowid", [id.as_str()])
    }

    pub fn datapoint_dataset(&self, id: &DatapointId) -> Result<Option<DatasetId>> {
        self.conn
            .query_row("SELECT dataset_id FROM datapoints WHERE datapoint_id = ?1", [id.as_str()], |r| {
                r.get::<_, String>(0)
            })
            .optional()
            .map(|s| s.map(DatasetId::from))
            .map_err(db_err)
    }

    pub fn insert_datapoint(&self, dp: &Datapoint, dataset: &DatasetId) -> Result<()> {
        self.exec(
            "INSERT INTO datapoints (datapoint_id, study_id, subject_id, occurrence_id, test_id, idempotency_key,
                dataset_id, doc) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                dp.datapoint_id.as_str(),
                dp.study_id.as_str(),
                dp.subject_id.as_str(),
                dp.occurrence_id.as_str(),
                dp.test_id.as_str(),
                dp.idempotency_key,
                dataset.as_str(),
                to_doc(dp)?
            ],
        )?;
        Ok(())
    }

    fn dataset_row(&self, sql: &str, p: impl rusqlite::Params) -> Result<Vec<Dataset>> {
        let mut stmt = self.conn.prepare_cached(sql).map_err(db_err)?;
        let rows = stmt
            .query_map(p, |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, String>(4)?,
                    r.get::<_, String>(5)?,
                    r.get::<_, String>(6)?,
                ))
            })
            .map_err(db_err)?;
        let mut out = Vec::new();
        for row in rows {
            let (id, study, testset, test, kind, day, status) = row.map_err(db_err)?;
            let dataset_id = DatasetId::from(id);
            let datapoint_ids = self.dataset_member_ids(&dataset_id)?;
            out.push(Dataset {
                dataset_id,
                study_id: StudyId::from(study),
                testset_id: TestSetId::from(testset),
                test_id: TestId::from(test),
                test_kind: TestKind::parse(&kind)
                    .ok_or_else(|| HgError::new(ErrorCode::Corrupt, format!("test kind {kind:?}")))?,
                day: parse_date(&day)?,
                datapoint_ids,
                status: DatasetStatus::parse(&status)
                    .ok_or_else(|| HgError::new(ErrorCode::Corrupt, format!("dataset status {status:?}")))?,
            });
        }
        Ok(out)
    }

    fn dataset_member_ids(&self, id: &DatasetId) -> Result<Vec<DatapointId>> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT datapoint_id FROM datapoints WHERE dataset_id = ?1 ORDER BY rowid")
            .map_err(db_err)?;
        let rows = stmt
            .query_map([id.as_str()], |r| r.get::<_, String>(0))
            .map_err(db_err)?;
        rows.map(|r| r.map(DatapointId::from).map_err(db_err)).collect()
    }

    pub fn get_dataset(&self, id: &DatasetId) -> Result<Option<Dataset>> {
        Ok(self
            .dataset_row(
                "SELECT dataset_id, study_id, testset_id, test_id, test_kind, day, status FROM datasets WHERE dataset_id = ?1",
                [id.as_str()],
            )?
            .pop())
    }

    pub fn list_datasets(&self, study: &StudyId, status: Option<DatasetStatus>) -> Result<Vec<Dataset>> {
        self.dataset_row(
            "SELECT dataset_id, study_id, testset_id, test_id, test_kind, day, status FROM datasets
             WHERE study_id = ?1 AND (?2 IS NULL OR status = ?2) ORDER BY rowid",
            params![study.as_str(), status.map(|s| s.as_str())],
        )
    }

    /// Datasets of `study` for `day`, any status.
    pub fn datasets_on(&self, study: &StudyId, day: NaiveDate) -> Result<Vec<Dataset>> {
        self.dataset_row(
            "SELECT dataset_id, study_id, testset_id, test_id, test_kind, day, status FROM datasets
             WHERE study_id = ?1 AND day = ?2 ORDER BY rowid",
            params![study.as_str(), day.to_string()],
        )
    }

    /// The open dataset for `(test, day)`, created if missing.
    pub fn open_dataset(
        &self,
        study: &StudyId,
        testset: &TestSetId,
        test: &TestId,
        kind: TestKind,
        day: NaiveDate,
    ) -> Result<DatasetId> {
        let existing: Option<String> = self
            .conn
            .query_row(
                "SELECT dataset_id FROM datasets WHERE test_id = ?1 AND day = ?2 AND status = 'open'",
                params![test.as_str(), day.to_string()],
                |r| r.get(0),
            )
            .optional()
            .map_err(db_err)?;
        if let Some(id) = existing {
            return Ok(DatasetId::from(id));
        }
        let id = DatasetId::generate();
        self.exec(
            "INSERT INTO datasets (dataset_id, study_id, testset_id, test_id, test_kind, day, status)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, 'open')",
            params![id.as_str(), study.as_str(), testset.as_str(), test.as_str(), kind.as_str(), day.to_string()],
        )?;
        Ok(id)
    }

    pub fn cas_dataset(&self, id: &DatasetId, from: DatasetStatus, to: DatasetStatus) -> Result<bool> {
        Ok(self.exec(
            "UPDATE datasets SET status = ?3 WHERE dataset_id = ?1 AND status = ?2",
            params![id.as_str(), from.as_str(), to.as_str()],
        )? == 1)
    }

    /// Open datasets whose day ended at or before `now`, or all open ones
    /// when `flush` is set.
    pub fn publishable(&self, now: Timestamp, flush: bool) -> Result<Vec<DatasetId>> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT dataset_id FROM datasets WHERE status = 'open' AND (?1 OR day < ?2) ORDER BY rowid")
            .map_err(db_err)?;
        let rows = stmt
            .query_map(params![flush, now.date().to_string()], |r| r.get::<_, String>(0))
            .map_err(db_err)?;
        rows.map(|r| r.map(DatasetId::from).map_err(db_err)).collect()
    }

    /// True when no dataset of `kind` for `day` is still open or has a
    /// ready or leased job, so every result for that day is in.
    pub fn day_settled(&self, study: &StudyId, kind: TestKind, day: NaiveDate) -> Result<bool> {
        let busy = self.count(
            "SELECT COUNT(*) FROM datasets s WHERE s.study_id = ?1 AND s.test_kind = ?2 AND s.day = ?3
               AND (s.status = 'open' OR EXISTS (SELECT 1 FROM jobs j WHERE j.dataset_id = s.dataset_id
                    AND j.state IN ('ready', 'leased')))",
            params![study.as_str(), kind.as_str(), day.to_string()],
        )?;
        Ok(busy == 0)
    }

    /// Test ids of `occ` that already have a datapoint.
    pub fn uploaded_tests(&self, occ: &OccurrenceId) -> Result<Vec<TestId>> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT DISTINCT test_id FROM datapoints WHERE occurrence_id = ?1")
            .map_err(db_err)?;
        let rows = stmt
            .query_map([occ.as_str()], |r| r.get::<_, String>(0))
            .map_err(db_err)?;
        rows.map(|r| r.map(TestId::from).map_err(db_err)).collect()
    }

    /// Marks `occ` completed once every test of its test-set has a datapoint.
    /// Expired occurrences stay expired.
    pub fn complete_if_done(&self, occ: &TaskOccurrence) -> Result<OccurrenceStatus> {
        let task = self
            .get_task(&occ.task_id)?
            .ok_or_else(|| HgError::internal(format!("occurrence {} has no task", occ.occurrence_id)))?;
        let ts = self
            .get_testset(&task.testset_id)?
            .ok_or_else(|| HgError::internal(format!("task {} has no test-set", task.task_id)))?;
        let done = self.uploaded_tests(&occ.occurrence_id)?;
        if ts.tests.iter().all(|t| done.contains(&t.test_id)) {
            self.cas_occurrence(
                &occ.occurrence_id,
                &[OccurrenceStatus::Pending, OccurrenceStatus::Delivered],
                OccurrenceStatus::Completed,
            )?;
        }
        Ok(self
            .get_occurrence(&occ.occurrence_id)?
            .map_or(occ.status, |o| o.status))
    }
}

/// Parses and checks an upload against the test kind, returning the
/// payload to store and, for files, the bytes to put in the object store.
fn check_payload(
    kind: TestKind,
    env: &UploadEnvelope,
    subject: &SubjectId,
) -> Result<(Option<(Vec<u8>, String)>, Option<Payload>)> {
    let mismatch = |what: &str| {
        HgError::schema(format!("{} test expects {what} payload, got {}", kind.as_str(), payload_kind(&env.payload)))
    };
    match (kind, &env.payload) {
        (TestKind::Phq8, UploadPayload::Text { text }) => {
            let doc = Phq8Document::parse(text.as_bytes())?;
            if &doc.subject_id != subject || doc.occurrence_id != env.occurrence_id {
                return Err(HgError::schema("phq8/v1: subject_id or occurrence_id does not match the upload"));
            }
            Ok((None, Some(Payload::Text { text: text.clone() })))
        }
        (TestKind::Phq8, _) => Err(mismatch("a text")),
        (TestKind::Tug | TestKind::SitToStand, UploadPayload::File { media_type, data_b64 }) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(data_b64.as_bytes())
                .map_err(|e| HgError::schema(format!("file payload is not base64: {e}")))?;
            if kind == TestKind::Tug {
                let doc = AccelDocument::parse(&bytes)?;
                if &doc.subject_id != subject {
                    return Err(HgError::schema("accel/v1: subject_id does not match the upload"));
                }
            } else {
                PoseDocument::parse(&bytes)?;
            }
            Ok((Some((bytes, media_type.clone())), None))
        }
        (_, _) => Err(mismatch("a file")),
    }
}

fn payload_kind(p: &UploadPayload) -> &'static str {
    match p {
        UploadPayload::Scalar { .. } => "scalar",
        UploadPayload::Text { .. } => "text",
        UploadPayload::File { .. } => "file",
    }
}

impl Store {
    /// Stores one upload from `subject`. Duplicate idempotency keys return
    /// the original datapoint unchanged.
    pub fn ingest(&self, subject: &SubjectId, env: &UploadEnvelope) -> Result<Ingested> {
        let (occ, kind) = self.read(|db| {
            let occ = db
                .get_occurrence(&env.occurrence_id)?
                .ok_or_else(|| HgError::not_found(format!("occurrence {}", env.occurrence_id)))?;
            if &occ.subject_id != subject {
                return Err(HgError::forbidden("occurrence belongs to another subject"));
            }
            let task = db
                .get_task(&occ.task_id)?
                .ok_or_else(|| HgError::internal("occurrence without task"))?;
            let test = db
                .get_test(&env.test_id)?
                .filter(|t| t.testset_id == task.testset_id)
                .ok_or_else(|| HgError::not_found(format!("test {} in this occurrence", env.test_id)))?;
            Ok((occ, test.test.kind))
        })?;

        if let Some(existing) = self.read(|db| self.existing(db, env))? {
            return Ok(existing);
        }
        let (file, inline) = check_payload(kind, env, subject)?;
        let payload = match (file, inline) {
            (Some((bytes, media_type)), _) => Payload::File {
                object: self.objects().put(&bytes, &media_type)?,
            },
            (None, Some(p)) => p,
            (None, None) => unreachable!("check_payload returns one of the two"),
        };

        self.write(|db| {
            if let Some(existing) = self.existing(db, env)? {
                return Ok(existing);
            }
            let occ = db.get_occurrence(&occ.occurrence_id)?.unwrap_or(occ);
            let task = db
                .get_task(&occ.task_id)?
                .ok_or_else(|| HgError::internal("occurrence without task"))?;
            let now = db.now;
            let late = occ.status == OccurrenceStatus::Expired || now >= occ.due_window.end;
            let dp = Datapoint {
                datapoint_id: DatapointId::generate(),
                study_id: occ.study_id.clone(),
                subject_id: subject.clone(),
                occurrence_id: occ.occurrence_id.clone(),
                test_id: env.test_id.clone(),
                test_kind: kind,
                payload,
                collected_at: env.collected_at.plus_millis(-env.clock_offset_ms),
                uploaded_at: now,
                idempotency_key: env.idempotency_key.clone(),
                late,
            };
            let dataset_id = db.open_dataset(&occ.study_id, &task.testset_id, &env.test_id, kind, now.date())?;
            db.insert_datapoint(&dp, &dataset_id)?;
            let occurrence_status = if late { occ.status } else { db.complete_if_done(&occ)? };
            Ok(Ingested {
                datapoint: dp,
                dataset_id,
                created: true,
                occurrence_status,
            })
        })
    }

    fn existing(&self, db: &Db<'_>, env: &UploadEnvelope) -> Result<Option<Ingested>> {
        let Some((dp, dataset_id)) = db.find_datapoint(&env.occurrence_id, &env.test_id, &env.idempotency_key)? else {
            return Ok(None);
        };
        let status = db
            .get_occurrence(&dp.occurrence_id)?
            .map_or(OccurrenceStatus::Pending, |o| o.status);
        Ok(Some(Ingested {
            datapoint: dp,
            dataset_id,
            created: false,
            occurrence_status: status,
        }))
    }

    /// Publishes every open dataset whose day has closed (all of them with
    /// `flush`) and enqueues one job each. Safe under concurrent callers.
    pub fn publish_datasets(&self, flush: bool) -> Result<Vec<(Dataset, Job)>> {
        let candidates = self.read(|db| db.publishable(db.now, flush))?;
        let mut out = Vec::new();
        for id in candidates {
            let published = self.write(|db| {
                if !db.cas_dataset(&id, DatasetStatus::Open, DatasetStatus::Published)? {
                    return Ok(None);
                }
                let ds = db
                    .get_dataset(&id)?
                    .ok_or_else(|| HgError::internal("dataset vanished"))?;
                let job = db.enqueue(&id, ds.test_kind.worker_kind())?;
                Ok(Some((ds, job)))
            })?;
            out.extend(published);
        }
        Ok(out)
    }
}
