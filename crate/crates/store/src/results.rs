//! Analytic results.

use hg_core::model::{AnalyticResult, TestKind};
use hg_core::{ResultId, Result, StudyId, SubjectId, TestId, Timestamp};
use rusqlite::{OptionalExtension, params};

use crate::db::{Db, Store, db_err, to_doc};

/// Filter for [`Db::list_results`]. `from` is inclusive, `to` exclusive.
#[derive(Debug, Clone, Default)]
pub struct ResultFilter {
    pub subject_id: Option<SubjectId>,
    pub test_id: Option<TestId>,
    pub test_kind: Option<TestKind>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
}

impl Db<'_> {
    /// Stores `result`. A second result for the same datapoint and worker
    /// kind replaces the body and time but keeps the first `result_id`.
    pub fn upsert_result(&self, result: &AnalyticResult, test_id: Option<&TestId>) -> Result<AnalyticResult> {
        let existing: Option<String> = match &result.datapoint_id {
            Some(dp) => self
                .conn
                .query_row(
                    "SELECT result_id FROM results WHERE datapoint_id = ?1 AND worker_kind = ?2",
                    params![dp.as_str(), result.worker_kind],
                    |r| r.get(0),
                )
                .optional()
                .map_err(db_err)?,
            None => None,
        };
        let mut stored = result.clone();
        if let Some(id) = existing {
            stored.result_id = ResultId::from(id);
            self.exec(
                "UPDATE results SET produced_at = ?2, doc = ?3, dataset_id = ?4, test_id = ?5 WHERE result_id = ?1",
                params![
                    stored.result_id.as_str(),
                    stored.produced_at.millis(),
                    to_doc(&stored)?,
                    stored.dataset_id.as_ref().map(|d| d.as_str().to_string()),
                    test_id.map(|t| t.as_str().to_string()),
                ],
            )?;
        } else {
            self.exec(
                "INSERT INTO results (result_id, study_id, subject_id, dataset_id, datapoint_id, test_id, worker_kind,
                    produced_at, doc) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
                params![
                    stored.result_id.as_str(),
                    stored.study_id.as_str(),
                    stored.subject_id.as_str(),
                    stored.dataset_id.as_ref().map(|d| d.as_str().to_string()),
                    stored.datapoint_id.as_ref().map(|d| d.as_str().to_string()),
                    test_id.map(|t| t.as_str().to_string()),
                    stored.worker_kind,
                    stored.produced_at.millis(),
                    to_doc(&stored)?,
                ],
            )?;
        }
        Ok(stored)
    }

    pub fn get_result(&self, id: &ResultId) -> Result<Option<AnalyticResult>> {
        self.doc("SELECT doc FROM results WHERE result_id = ?1", [id.as_str()])
    }

    /// Results of `study` in ascending `produced_at` order.
    pub fn list_results(&self, study: &StudyId, f: &ResultFilter) -> Result<Vec<AnalyticResult>> {
        self.docs(
            "SELECT doc FROM results WHERE study_id = ?1
               AND (?2 IS NULL OR subject_id = ?2)
               AND (?3 IS NULL OR test_id = ?3)
               AND (?4 IS NULL OR worker_kind = ?4)
               AND (?5 IS NULL OR produced_at >= ?5)
               AND (?6 IS NULL OR produced_at < ?6)
             ORDER BY produced_at, rowid",
            params![
                study.as_str(),
                f.subject_id.as_ref().map(|s| s.as_str().to_string()),
                f.test_id.as_ref().map(|s| s.as_str().to_string()),
                f.test_kind.map(|k| k.worker_kind()),
                f.from.map(Timestamp::millis),
                f.to.map(Timestamp::millis),
            ],
        )
    }

    /// Results of one worker kind produced in `[from, to)` across the study.
    pub fn results_between(
        &self,
        study: &StudyId,
        worker_kind: &str,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Vec<AnalyticResult>> {
        self.docs(
            "SELECT doc FROM results WHERE study_id = ?1 AND worker_kind = ?2 AND produced_at >= ?3 AND produced_at < ?4
             ORDER BY produced_at, rowid",
            params![study.as_str(), worker_kind, from.millis(), to.millis()],
        )
    }

    /// Results of `worker_kind` whose datapoint was uploaded on `day`.
    pub fn results_for_upload_day(
        &self,
        study: &StudyId,
        worker_kind: &str,
        day: chrono::NaiveDate,
    ) -> Result<Vec<AnalyticResult>> {
        self.docs(
            "SELECT r.doc FROM results r
               JOIN datapoints d ON d.datapoint_id = r.datapoint_id
               JOIN datasets s ON s.dataset_id = d.dataset_id
             WHERE r.study_id = ?1 AND r.worker_kind = ?2 AND s.day = ?3
             ORDER BY r.produced_at, r.rowid",
            params![study.as_str(), worker_kind, day.to_string()],
        )
    }

    pub fn results_for_dataset(&self, dataset: &hg_core::DatasetId) -> Result<Vec<AnalyticResult>> {
        self.docs(
            "SELECT doc FROM results WHERE dataset_id = ?1 ORDER BY produced_at, rowid",
            [dataset.as_str()],
        )
    }
}

impl Store {
    pub fn upsert_result(&self, result: &AnalyticResult, test_id: Option<&TestId>) -> Result<AnalyticResult> {
        self.write(|db| db.upsert_result(result, test_id))
    }

    pub fn list_results(&self, study: &StudyId, f: &ResultFilter) -> Result<Vec<AnalyticResult>> {
        self.read(|db| db.list_results(study, f))
    }
}
