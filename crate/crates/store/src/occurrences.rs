use std::collections::BTreeMap;

use hg_core::model::{DueWindow, OccurrenceStatus, TaskOccurrence};
use hg_core::{ErrorCode, HgError, OccurrenceId, Result, StudyId, SubjectId, TaskId, Timestamp};
use rusqlite::{OptionalExtension, Row, params};

use crate::db::{Db, db_err, parse_date};

const COLUMNS: &str =
    "occurrence_id, task_id, study_id, subject_id, slot_date, window_start, window_end, status";

type RawOccurrence = (String, String, String, String, String, i64, i64, String);

fn raw(r: &Row<'_>) -> rusqlite::Result<RawOccurrence> {
    Ok((
        r.get(0)?,
        r.get(1)?,
        r.get(2)?,
        r.get(3)?,
        r.get(4)?,
        r.get(5)?,
        r.get(6)?,
        r.get(7)?,
    ))
}

fn build(r: RawOccurrence) -> Result<TaskOccurrence> {
    let (id, task, study, subject, date, start, end, status) = r;
    Ok(TaskOccurrence {
        occurrence_id: OccurrenceId::from(id),
        task_id: TaskId::from(task),
        study_id: StudyId::from(study),
        subject_id: SubjectId::from(subject),
        slot_date: parse_date(&date)?,
        due_window: DueWindow {
            start: Timestamp::from_millis(start),
            end: Timestamp::from_millis(end),
        },
        status: OccurrenceStatus::parse(&status)
            .ok_or_else(|| HgError::new(ErrorCode::Corrupt, format!("occurrence status {status:?}")))?,
    })
}

/// Filters for [`Db::list_occurrences`]; `None` matches anything.
#[derive(Debug, Clone, Default)]
pub struct OccurrenceFilter {
    pub task_id: Option<TaskId>,
    pub subject_id: Option<SubjectId>,
    pub status: Option<OccurrenceStatus>,
}

impl Db<'_> {
    fn occurrences_where(&self, clause: &str, params: impl rusqlite::Params) -> Result<Vec<TaskOccurrence>> {
        let sql = format!("SELECT {COLUMNS} FROM occurrences WHERE {clause} ORDER BY rowid");
        let mut stmt = self.conn.prepare_cached(&sql).map_err(db_err)?;
        let rows = stmt.query_map(params, raw).map_err(db_err)?;
        let mut out = Vec::new();
        for r in rows {
            out.push(build(r.map_err(db_err)?)?);
        }
        Ok(out)
    }

    /// Inserts unless `(task, subject, slot_date)` already exists. Returns
    /// whether a row was written.
    pub fn insert_occurrence(&self, o: &TaskOccurrence) -> Result<bool> {
        let n = self.exec(
            "INSERT OR IGNORE INTO occurrences (occurrence_id, task_id, study_id, subject_id, slot_date,
                window_start, window_end, status) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                o.occurrence_id.as_str(),
                o.task_id.as_str(),
                o.study_id.as_str(),
                o.subject_id.as_str(),
                o.slot_date.to_string(),
                o.due_window.start.millis(),
                o.due_window.end.millis(),
                o.status.as_str()
            ],
        )?;
        Ok(n == 1)
    }

    pub fn get_occurrence(&self, id: &OccurrenceId) -> Result<Option<TaskOccurrence>> {
        let sql = format!("SELECT {COLUMNS} FROM occurrences WHERE occurrence_id = ?1");
        self.conn
            .query_row(&sql, [id.as_str()], raw)
            .optional()
            .map_err(db_err)?
            .map(build)
            .transpose()
    }

    pub fn list_occurrences(&self, study: &StudyId, f: &OccurrenceFilter) -> Result<Vec<TaskOccurrence>> {
        self.occurrences_where(
            "study_id = ?1 AND (?2 IS NULL OR task_id = ?2) AND (?3 IS NULL OR subject_id = ?3)
             AND (?4 IS NULL OR status = ?4)",
            params![
                study.as_str(),
                f.task_id.as_ref().map(|t| t.as_str()),
                f.subject_id.as_ref().map(|s| s.as_str()),
                f.status.map(|s| s.as_str())
            ],
        )
    }

    /// Pending or delivered occurrences of `subject` whose window contains `at`.
    pub fn due_occurrences(&self, subject: &SubjectId, at: Timestamp) -> Result<Vec<TaskOccurrence>> {
        self.occurrences_where(
            "subject_id = ?1 AND status IN ('pending', 'delivered') AND window_start <= ?2 AND ?2 < window_end",
            params![subject.as_str(), at.millis()],
        )
    }

    /// Moves `id` to `to` if its current status is one of `from` and the
    /// edge is allowed. Returns whether the row changed.
    pub fn cas_occurrence(&self, id: &OccurrenceId, from: &[OccurrenceStatus], to: OccurrenceStatus) -> Result<bool> {
        let mut changed = false;
        for &f in from.iter().filter(|f| f.can_transition_to(to)) {
            changed |= self.exec(
                "UPDATE occurrences SET status = ?3 WHERE occurrence_id = ?1 AND status = ?2",
                params![id.as_str(), f.as_str(), to.as_str()],
            )? == 1;
            if changed {
                break;
            }
        }
        Ok(changed)
    }

    /// Expires every open occurrence whose window ended at or before `now`.
    pub fn expire_occurrences(&self, now: Timestamp) -> Result<usize> {
        self.exec(
            "UPDATE occurrences SET status = 'expired'
             WHERE status IN ('pending', 'delivered') AND window_end <= ?1",
            [now.millis()],
        )
    }

    pub fn occurrence_counts(&self, study: &StudyId) -> Result<BTreeMap<OccurrenceStatus, u64>> {
        let mut out: BTreeMap<OccurrenceStatus, u64> = OccurrenceStatus::ALL.iter().map(|s| (*s, 0)).collect();
        let mut stmt = self
            .conn
            .prepare_cached("SELECT status, COUNT(*) FROM occurrences WHERE study_id = ?1 GROUP BY status")
            .map_err(db_err)?;
        let rows = stmt
            .query_map([study.as_str()], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)))
            .map_err(db_err)?;
        for row in rows {
            let (status, n) = row.map_err(db_err)?;
            let s = OccurrenceStatus::parse(&status)
                .ok_or_else(|| HgError::new(ErrorCode::Corrupt, format!("occurrence status {status:?}")))?;
            out.insert(s, n as u64);
        }
        Ok(out)
    }
}
