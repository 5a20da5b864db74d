use chrono::NaiveDate;
use hg_core::model::{Cohort, Role, Rule, ScheduleMode, Study, Subject, Task, Test, TestKind, TestSet};
use hg_core::{
    CohortId, DatasetId, HgError, Result, RuleId, StudyId, SubjectId, TaskId, TestId, TestSetId, Timestamp,
    base32_lower,
};
use rusqlite::{OptionalExtension, params};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::db::{Db, db_err, parse_date, to_doc};

pub const TOKEN_PREFIX: &str = "hgt_";

pub fn hash_token(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

/// A stored bearer credential; the token itself is never persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub role: Role,
    pub study_id: Option<StudyId>,
    pub subject_id: Option<SubjectId>,
    pub device_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultEntry {
    pub raw_id: String,
    pub pseudonym: SubjectId,
    pub study_id: StudyId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRun {
    pub rule_id: RuleId,
    pub day: NaiveDate,
    pub ran_at: Timestamp,
    pub cohort_id: Option<CohortId>,
    pub task_id: Option<TaskId>,
    pub matched: usize,
}

/// Test definition with its owning test-set.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRef {
    pub test: Test,
    pub testset_id: TestSetId,
    pub study_id: StudyId,
}

impl Db<'_> {
    pub fn insert_study(&self, study: &Study, salt: &[u8]) -> Result<()> {
        if self.study_by_name(&study.name)?.is_some() {
            return Err(HgError::conflict(format!("study named {:?} already exists", study.name)));
        }
        self.exec(
            "INSERT INTO studies (study_id, name, salt, doc) VALUES (?1, ?2, ?3, ?4)",
            params![study.study_id.as_str(), study.name, salt, to_doc(study)?],
        )?;
        Ok(())
    }

    pub fn get_study(&self, id: &StudyId) -> Result<Option<Study>> {
        self.doc("SELECT doc FROM studies WHERE study_id = ?1", [id.as_str()])
    }

    pub fn study_by_name(&self, name: &str) -> Result<Option<Study>> {
        self.doc("SELECT doc FROM studies WHERE name = ?1", [name])
    }

    pub fn list_studies(&self) -> Result<Vec<Study>> {
        self.docs("SELECT doc FROM studies ORDER BY rowid", [])
    }

    pub fn study_salt(&self, id: &StudyId) -> Result<Vec<u8>> {
        self.conn
            .query_row("SELECT salt FROM studies WHERE study_id = ?1", [id.as_str()], |r| r.get(0))
            .optional()
            .map_err(db_err)?
            .ok_or_else(|| HgError::not_found(format!("study {id}")))
    }

    /// Mints a fresh `hgt_` token and stores its hash.
    pub fn mint_token(&self, cred: &Credential) -> Result<String> {
        let token = format!("{TOKEN_PREFIX}{}", base32_lower(&rand::random::<[u8; 20]>()));
        self.insert_token(&token, cred)?;
        Ok(token)
    }

    pub fn insert_token(&self, token: &str, cred: &Credential) -> Result<()> {
        self.exec(
            "INSERT OR REPLACE INTO credentials (token_hash, role, study_id, subject_id, device_id, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                hash_token(token),
                cred.role.as_str(),
                cred.study_id.as_ref().map(|s| s.as_str()),
                cred.subject_id.as_ref().map(|s| s.as_str()),
                cred.device_id,
                self.now.millis()
            ],
        )?;
        Ok(())
    }

    pub fn credential(&self, token: &str) -> Result<Option<Credential>> {
        let row = self
            .conn
            .query_row(
                "SELECT role, study_id, subject_id, device_id FROM credentials WHERE token_hash = ?1",
                [hash_token(token)],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, Option<String>>(1)?,
                        r.get::<_, Option<String>>(2)?,
                        r.get::<_, Option<String>>(3)?,
                    ))
                },
            )
            .optional()
            .map_err(db_err)?;
        row.map(|(role, study, subject, device)| {
            Ok(Credential {
                role: Role::parse(&role)?,
                study_id: study.map(StudyId::from),
                subject_id: subject.map(SubjectId::from),
                device_id: device,
            })
        })
        .transpose()
    }

    /// Inserts a subject and, when given, its vault mapping.
    pub fn insert_subject(&self, subject: &Subject, raw_id: Option<&str>) -> Result<()> {
        if let Some(device) = &subject.device_id
            && self.subject_by_device(device)?.is_some()
        {
            return Err(HgError::conflict(format!("device {device} is already bound")));
        }
        if self.get_subject(&subject.subject_id)?.is_some() {
            return Err(HgError::conflict(format!("subject {} already enrolled", subject.subject_id)));
        }
        self.exec(
            "INSERT INTO subjects (subject_id, study_id, device_id, doc) VALUES (?1, ?2, ?3, ?4)",
            params![
                subject.subject_id.as_str(),
                subject.study_id.as_str(),
                subject.device_id,
                to_doc(subject)?
            ],
        )?;
        if let Some(raw) = raw_id {
            self.exec(
                "INSERT INTO vault (study_id, raw_id, subject_id) VALUES (?1, ?2, ?3)",
                params![subject.study_id.as_str(), raw, subject.subject_id.as_str()],
            )?;
        }
        Ok(())
    }

    pub fn get_subject(&self, id: &SubjectId) -> Result<Option<Subject>> {
        self.doc("SELECT doc FROM subjects WHERE subject_id = ?1", [id.as_str()])
    }

    pub fn subject_by_device(&self, device_id: &str) -> Result<Option<Subject>> {
        self.doc("SELECT doc FROM subjects WHERE device_id = ?1", [device_id])
    }

    pub fn list_subjects(&self, study: &StudyId) -> Result<Vec<Subject>> {
        self.docs("SELECT doc FROM subjects WHERE study_id = ?1 ORDER BY rowid", [study.as_str()])
    }

    pub fn vault(&self, study: &StudyId) -> Result<Vec<VaultEntry>> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT raw_id, subject_id FROM vault WHERE study_id = ?1 ORDER BY rowid")
            .map_err(db_err)?;
        let rows = stmt
            .query_map([study.as_str()], |r| {
                Ok(VaultEntry {
                    raw_id: r.get(0)?,
                    pseudonym: SubjectId::from(r.get::<_, String>(1)?),
                    study_id: study.clone(),
                })
            })
            .map_err(db_err)?;
        rows.collect::<rusqlite::Result<_>>().map_err(db_err)
    }

    pub fn insert_cohort(&self, cohort: &Cohort) -> Result<()> {
        self.exec(
            "INSERT INTO cohorts (cohort_id, study_id, name, doc) VALUES (?1, ?2, ?3, ?4)",
            params![cohort.cohort_id.as_str(), cohort.study_id.as_str(), cohort.name, to_doc(cohort)?],
        )?;
        Ok(())
    }

    pub fn get_cohort(&self, id: &CohortId) -> Result<Option<Cohort>> {
        self.doc("SELECT doc FROM cohorts WHERE cohort_id = ?1", [id.as_str()])
    }

    pub fn cohort_by_name(&self, study: &StudyId, name: &str) -> Result<Option<Cohort>> {
        self.doc(
            "SELECT doc FROM cohorts WHERE study_id = ?1 AND name = ?2 ORDER BY rowid LIMIT 1",
            [study.as_str(), name],
        )
    }

    pub fn list_cohorts(&self, study: &StudyId) -> Result<Vec<Cohort>> {
        self.docs("SELECT doc FROM cohorts WHERE study_id = ?1 ORDER BY rowid", [study.as_str()])
    }

    pub fn insert_testset(&self, ts: &TestSet) -> Result<()> {
        self.exec(
            "INSERT INTO testsets (testset_id, study_id, name, doc) VALUES (?1, ?2, ?3, ?4)",
            params![ts.testset_id.as_str(), ts.study_id.as_str(), ts.name, to_doc(ts)?],
        )?;
        for t in &ts.tests {
            self.exec(
                "INSERT INTO tests (test_id, testset_id, study_id, kind) VALUES (?1, ?2, ?3, ?4)",
                params![t.test_id.as_str(), ts.testset_id.as_str(), ts.study_id.as_str(), t.kind.as_str()],
            )?;
        }
        Ok(())
    }

    pub fn get_testset(&self, id: &TestSetId) -> Result<Option<TestSet>> {
        self.doc("SELECT doc FROM testsets WHERE testset_id = ?1", [id.as_str()])
    }

    pub fn testset_by_name(&self, study: &StudyId, name: &str) -> Result<Option<TestSet>> {
        self.doc(
            "SELECT doc FROM testsets WHERE study_id = ?1 AND name = ?2 ORDER BY rowid LIMIT 1",
            [study.as_str(), name],
        )
    }

    pub fn list_testsets(&self, study: &StudyId) -> Result<Vec<TestSet>> {
        self.docs("SELECT doc FROM testsets WHERE study_id = ?1 ORDER BY rowid", [study.as_str()])
    }

    pub fn get_test(&self, id: &TestId) -> Result<Option<TestRef>> {
        let row: Option<(String, String)> = self
            .conn
            .query_row(
                "SELECT testset_id, study_id FROM tests WHERE test_id = ?1",
                [id.as_str()],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()
            .map_err(db_err)?;
        let Some((testset_id, study_id)) = row else {
            return Ok(None);
        };
        let testset_id = TestSetId::from(testset_id);
        let ts = self
            .get_testset(&testset_id)?
            .ok_or_else(|| HgError::internal(format!("test {id} has no test-set")))?;
        let test = ts
            .tests
            .into_iter()
            .find(|t| &t.test_id == id)
            .ok_or_else(|| HgError::internal(format!("test {id} missing from its test-set")))?;
        Ok(Some(TestRef {
            test,
            testset_id,
            study_id: StudyId::from(study_id),
        }))
    }

    pub fn test_kind(&self, id: &TestId) -> Result<Option<TestKind>> {
        Ok(self.get_test(id)?.map(|t| t.test.kind))
    }

    pub fn insert_task(&self, task: &Task) -> Result<()> {
        let mode = match task.schedule.mode {
            ScheduleMode::Once => "once",
            ScheduleMode::Daily => "daily",
        };
        self.exec(
            "INSERT INTO tasks (task_id, study_id, mode, doc) VALUES (?1, ?2, ?3, ?4)",
            params![task.task_id.as_str(), task.study_id.as_str(), mode, to_doc(task)?],
        )?;
        Ok(())
    }

    pub fn get_task(&self, id: &TaskId) -> Result<Option<Task>> {
        self.doc("SELECT doc FROM tasks WHERE task_id = ?1", [id.as_str()])
    }

    pub fn list_tasks(&self, study: &StudyId) -> Result<Vec<Task>> {
        self.docs("SELECT doc FROM tasks WHERE study_id = ?1 ORDER BY rowid", [study.as_str()])
    }

    /// Daily tasks across all studies.
    pub fn daily_tasks(&self) -> Result<Vec<Task>> {
        self.docs("SELECT doc FROM tasks WHERE mode = 'daily' ORDER BY rowid", [])
    }

    pub fn insert_rule(&self, rule: &Rule) -> Result<()> {
        self.exec(
            "INSERT INTO rules (rule_id, study_id, name, doc) VALUES (?1, ?2, ?3, ?4)",
            params![rule.rule_id.as_str(), rule.study_id.as_str(), rule.name, to_doc(rule)?],
        )?;
        Ok(())
    }

    pub fn get_rule(&self, id: &RuleId) -> Result<Option<Rule>> {
        self.doc("SELECT doc FROM rules WHERE rule_id = ?1", [id.as_str()])
    }

    pub fn rule_by_name(&self, study: &StudyId, name: &str) -> Result<Option<Rule>> {
        self.doc(
            "SELECT doc FROM rules WHERE study_id = ?1 AND name = ?2 ORDER BY rowid LIMIT 1",
            [study.as_str(), name],
        )
    }

    pub fn list_rules(&self, study: &StudyId) -> Result<Vec<Rule>> {
        self.docs("SELECT doc FROM rules WHERE study_id = ?1 ORDER BY rowid", [study.as_str()])
    }

    pub fn all_rules(&self) -> Result<Vec<Rule>> {
        self.docs("SELECT doc FROM rules ORDER BY rowid", [])
    }

    /// Claims `(rule, day)`. False when it already ran.
    pub fn record_rule_run(&self, run: &RuleRun) -> Result<bool> {
        let n = self.exec(
            "INSERT OR IGNORE INTO rule_runs (rule_id, day, ran_at, cohort_id, task_id, matched)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                run.rule_id.as_str(),
                run.day.to_string(),
                run.ran_at.millis(),
                run.cohort_id.as_ref().map(|c| c.as_str()),
                run.task_id.as_ref().map(|t| t.as_str()),
                run.matched as i64
            ],
        )?;
        Ok(n == 1)
    }

    pub fn rule_runs(&self, rule: &RuleId) -> Result<Vec<RuleRun>> {
        let mut stmt = self
            .conn
            .prepare_cached(
                "SELECT day, ran_at, cohort_id, task_id, matched FROM rule_runs WHERE rule_id = ?1 ORDER BY day",
            )
            .map_err(db_err)?;
        let rows = stmt
            .query_map([rule.as_str()], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, i64>(1)?,
                    r.get::<_, Option<String>>(2)?,
                    r.get::<_, Option<String>>(3)?,
                    r.get::<_, i64>(4)?,
                ))
            })
            .map_err(db_err)?;
        let mut out = Vec::new();
        for row in rows {
            let (day, ran_at, cohort, task, matched) = row.map_err(db_err)?;
            out.push(RuleRun {
                rule_id: rule.clone(),
                day: parse_date(&day)?,
                ran_at: Timestamp::from_millis(ran_at),
                cohort_id: cohort.map(CohortId::from),
                task_id: task.map(TaskId::from),
                matched: matched as usize,
            });
        }
        Ok(out)
    }

    pub fn rule_ran(&self, rule: &RuleId, day: NaiveDate) -> Result<bool> {
        Ok(self.count(
            "SELECT COUNT(*) FROM rule_runs WHERE rule_id = ?1 AND day = ?2",
            params![rule.as_str(), day.to_string()],
        )? > 0)
    }

    /// Entity counts per table for a study, keyed by table name.
    pub fn counts(&self, study: &StudyId) -> Result<std::collections::BTreeMap<&'static str, u64>> {
        let mut out = std::collections::BTreeMap::new();
        for table in [
            "subjects",
            "cohorts",
            "testsets",
            "tasks",
            "rules",
            "occurrences",
            "datapoints",
            "datasets",
            "results",
        ] {
            let n = self.count(&format!("SELECT COUNT(*) FROM {table} WHERE study_id = ?1"), [study.as_str()])?;
            out.insert(table, n);
        }
        Ok(out)
    }

    /// Owning study of a dataset, if it exists.
    pub fn dataset_study(&self, id: &DatasetId) -> Result<Option<StudyId>> {
        self.conn
            .query_row("SELECT study_id FROM datasets WHERE dataset_id = ?1", [id.as_str()], |r| {
                r.get::<_, String>(0)
            })
            .optional()
            .map(|s| s.map(StudyId::from))
            .map_err(db_err)
    }
}
