//! Service operations. Every call takes the authenticated [`Principal`]
//! and enforces study isolation before touching the store.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::NaiveDate;
use hg_core::dataprep::pseudonymize;
use hg_core::model::*;
use hg_core::payload::UploadEnvelope;
use hg_core::validate::{EntityRef, Lookup, validate_entity};
use hg_core::*;
use hg_store::{Credential, Db, Ingested, Job, OccurrenceFilter, Outcome, QueueStats, ResultFilter, RuleRun, Store, VaultEntry};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Who is calling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Researcher { study_id: StudyId },
    Device { study_id: StudyId, subject_id: SubjectId, device_id: String },
    Worker,
}

impl Principal {
    pub fn role(&self) -> Role {
        match self {
            Principal::Researcher { .. } => Role::Researcher,
            Principal::Device { .. } => Role::Device,
            Principal::Worker => Role::Worker,
        }
    }

    fn study(&self) -> Option<&StudyId> {
        match self {
            Principal::Researcher { study_id } | Principal::Device { study_id, .. } => Some(study_id),
            Principal::Worker => None,
        }
    }
}

fn forbidden() -> HgError {
    HgError::forbidden("credential does not grant access to this study")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateStudy {
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyCreated {
    pub study: Study,
    /// Researcher token; shown once.
    pub token: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewSubject {
    /// Raw identifier, pseudonymized with the study salt. A random id is
    /// used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_id: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttrValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectCreated {
    pub subject: Subject,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_token: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewCohort {
    pub name: String,
    pub selector: CohortSelector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewTest {
    pub kind: TestKind,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewTestSet {
    pub name: String,
    pub tests: Vec<NewTest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewTask {
    pub testset_id: TestSetId,
    pub cohort_id: CohortId,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskCreated {
    pub task: Task,
    pub occurrences: Vec<TaskOccurrence>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewRule {
    #[serde(default)]
    pub name: String,
    pub trigger: Trigger,
    pub predicate: Predicate,
    pub action: RuleAction,
    #[serde(default = "yes")]
    pub active: bool,
}

fn yes() -> bool {
    true
}

/// What a device needs to run one occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceDescriptor {
    pub occurrence_id: OccurrenceId,
    pub task_id: TaskId,
    pub study_id: StudyId,
    pub subject_id: SubjectId,
    pub due_window: DueWindow,
    pub status: OccurrenceStatus,
    pub testset_name: String,
    pub tests: Vec<Test>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitResult {
    pub datapoint_id: DatapointId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<DatasetId>,
    pub worker_kind: String,
    #[serde(default = "one")]
    pub schema_version: u32,
    pub body: Value,
}

fn one() -> u32 {
    1
}

/// A leased job with everything a worker needs except file bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimedJob {
    pub job: Job,
    pub dataset: Dataset,
    pub datapoints: Vec<Datapoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimRequest {
    pub worker_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease_secs: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckRequest {
    pub outcome: Outcome,
    pub lease_attempts: u32,
}

/// Query for the results gateway. `test` accepts a test id, a test kind or
/// a worker kind.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResultQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<SubjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<Timestamp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportBundle {
    pub study: Study,
    pub results: Vec<AnalyticResult>,
    pub datapoints: Vec<Datapoint>,
    pub vault: Vec<VaultEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cohort_id: CohortId,
    pub name: String,
    pub members: usize,
    pub origin: CohortOrigin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: TaskId,
    pub testset_id: TestSetId,
    pub cohort_id: CohortId,
    pub mode: ScheduleMode,
    pub occurrences: BTreeMap<OccurrenceStatus, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule_id: RuleId,
    pub name: String,
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_fired_at: Option<Timestamp>,
    pub runs: usize,
}

/// Study board: entity counts and occurrence tallies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub study: Study,
    pub counts: BTreeMap<String, u64>,
    pub occurrences: BTreeMap<OccurrenceStatus, u64>,
    pub cohorts: Vec<CohortSummary>,
    pub tasks: Vec<TaskSummary>,
    pub rules: Vec<RuleSummary>,
}

/// What one scheduler pass did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub now: Timestamp,
    pub materialized: usize,
    pub expired: usize,
    pub published: Vec<DatasetId>,
    pub rule_runs: Vec<RuleRun>,
}

/// Outcome of evaluating one rule for one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEvaluation {
    pub run: RuleRun,
    pub members: BTreeSet<SubjectId>,
    /// False when the rule had already run for this day.
    pub fresh: bool,
}

struct StoreLookup<'a, 'b>(&'a Db<'b>);

impl Lookup for StoreLookup<'_, '_> {
    fn study_of(&self, kind: EntityKind, id: &str) -> Option<StudyId> {
        let db = self.0;
        let r = match kind {
            EntityKind::Subject => db.get_subject(&SubjectId::from(id.to_owned())).map(|o| o.map(|e| e.study_id)),
            EntityKind::Cohort => db.get_cohort(&CohortId::from(id.to_owned())).map(|o| o.map(|e| e.study_id)),
            EntityKind::TestSet => db.get_testset(&TestSetId::from(id.to_owned())).map(|o| o.map(|e| e.study_id)),
            EntityKind::Study => db.get_study(&StudyId::from(id.to_owned())).map(|o| o.map(|e| e.study_id)),
            _ => Ok(None),
        };
        r.ok().flatten()
    }
}

fn check(entity: EntityRef<'_>, db: &Db<'_>) -> Result<()> {
    let v = validate_entity(entity, &StoreLookup(db));
    if v.is_ok() { Ok(()) } else { Err(HgError::validation(v.summary())) }
}

/// Members of `source` whose metric satisfies the rule predicate. Missing
/// or non-numeric metrics skip that result.
pub fn rule_members<'a>(
    rule: &Rule,
    source: &BTreeSet<SubjectId>,
    results: impl IntoIterator<Item = &'a AnalyticResult>,
) -> BTreeSet<SubjectId> {
    // Latest result per subject wins.
    let mut latest: BTreeMap<&SubjectId, &AnalyticResult> = BTreeMap::new();
    for r in results {
        if !source.contains(&r.subject_id) {
            continue;
        }
        match latest.get(&r.subject_id) {
            Some(prev) if prev.produced_at > r.produced_at => {}
            _ => {
                latest.insert(&r.subject_id, r);
            }
        }
    }
    let mut out = BTreeSet::new();
    for (subject, r) in latest {
        match r.metric(&rule.predicate.metric) {
            Some(v) if rule.predicate.holds(v) => {
                out.insert(subject.clone());
            }
            Some(_) => {}
            None => tracing::warn!(
                rule = %rule.rule_id,
                result = %r.result_id,
                metric = %rule.predicate.metric,
                "result body lacks rule metric; skipped"
            ),
        }
    }
    out
}

fn trigger_kind(rule: &Rule) -> Option<TestKind> {
    match &rule.trigger {
        Trigger::OnResult { worker_kind } => TestKind::from_worker_kind(worker_kind),
        Trigger::Daily { .. } => TestKind::ALL
            .into_iter()
            .find(|k| k.metrics().contains(&rule.predicate.metric.as_str())),
    }
}

/// The clinical task manager.
pub struct Service {
    store: Arc<Store>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").finish_non_exhaustive()
    }
}

impl Service {
    pub fn new(store: Arc<Store>) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn now(&self) -> Timestamp {
        self.store.now()
    }

    /// Registers `token` as the deployment's worker credential.
    pub fn install_worker_token(&self, token: &str) -> Result<()> {
        let cred = Credential { role: Role::Worker, study_id: None, subject_id: None, device_id: None };
        self.store.write(|db| db.insert_token(token, &cred))
    }

    pub fn authenticate(&self, token: Option<&str>) -> Result<Principal> {
        let token = token.ok_or_else(|| HgError::new(ErrorCode::Unauthorized, "missing bearer token"))?;
        let cred = self
            .store
            .read(|db| db.credential(token))?
            .ok_or_else(|| HgError::new(ErrorCode::Unauthorized, "unknown token"))?;
        let missing = || HgError::new(ErrorCode::Unauthorized, "credential is incomplete");
        Ok(match cred.role {
            Role::Worker => Principal::Worker,
            Role::Researcher => Principal::Researcher { study_id: cred.study_id.ok_or_else(missing)? },
            Role::Device => Principal::Device {
                study_id: cred.study_id.ok_or_else(missing)?,
                subject_id: cred.subject_id.ok_or_else(missing)?,
                device_id: cred.device_id.ok_or_else(missing)?,
            },
        })
    }

    fn researcher(p: &Principal, study: &StudyId) -> Result<()> {
        match p {
            Principal::Researcher { study_id } if study_id == study => Ok(()),
            _ => Err(forbidden()),
        }
    }

    fn worker(p: &Principal) -> Result<()> {
        match p {
            Principal::Worker => Ok(()),
            _ => Err(HgError::forbidden("worker credential required")),
        }
    }

    /// Fails with FORBIDDEN when `owner` is not the principal's study.
    fn owned(p: &Principal, owner: &StudyId) -> Result<()> {
        match p.study() {
            Some(s) if s == owner => Ok(()),
            _ => Err(forbidden()),
        }
    }

    pub fn create_study(&self, req: &CreateStudy) -> Result<StudyCreated> {
        let study = Study { study_id: StudyId::generate(), name: req.name.trim().to_string(), created_at: self.now() };
        let salt: [u8; 32] = rand::random();
        self.store.write(|db| {
            check(EntityRef::Study(&study), db)?;
            db.insert_study(&study, &salt)?;
            let token = db.mint_token(&Credential {
                role: Role::Researcher,
                study_id: Some(study.study_id.clone()),
                subject_id: None,
                device_id: None,
            })?;
            Ok(StudyCreated { study: study.clone(), token })
        })
    }

    pub fn get_study(&self, p: &Principal, id: &StudyId) -> Result<Study> {
        Self::owned(p, id)?;
        self.store
            .read(|db| db.get_study(id))?
            .ok_or_else(|| HgError::not_found(format!("study {id}")))
    }

    pub fn list_studies(&self, p: &Principal) -> Result<Vec<Study>> {
        let all = self.store.read(|db| db.list_studies())?;
        Ok(match p {
            Principal::Worker => all,
            _ => all.into_iter().filter(|s| Some(&s.study_id) == p.study()).collect(),
        })
    }

    pub fn add_subject(&self, p: &Principal, study: &StudyId, req: &NewSubject) -> Result<SubjectCreated> {
        Self::researcher(p, study)?;
        self.store.write(|db| {
            let salt = db.study_salt(study)?;
            let subject_id = match &req.raw_id {
                Some(raw) if raw.trim().is_empty() => return Err(HgError::validation("raw_id is empty")),
                Some(raw) => pseudonymize(&salt, raw),
                None => SubjectId::generate(),
            };
            let subject = Subject {
                subject_id,
                study_id: study.clone(),
                attributes: req.attributes.clone(),
                device_id: req.device_id.clone(),
            };
            check(EntityRef::Subject(&subject), db)?;
            if let Some(d) = &req.device_id
                && d.trim().is_empty()
            {
                return Err(HgError::validation("device_id is empty"));
            }
            db.insert_subject(&subject, req.raw_id.as_deref())?;
            let device_token = match &subject.device_id {
                Some(d) => Some(db.mint_token(&Self::device_cred(&subject, d))?),
                None => None,
            };
            Ok(SubjectCreated { subject, device_token })
        })
    }

    fn device_cred(subject: &Subject, device_id: &str) -> Credential {
        Credential {
            role: Role::Device,
            study_id: Some(subject.study_id.clone()),
            subject_id: Some(subject.subject_id.clone()),
            device_id: Some(device_id.to_string()),
        }
    }

    /// Mints a fresh device token for an enrolled device.
    pub fn device_token(&self, p: &Principal, study: &StudyId, device_id: &str) -> Result<String> {
        Self::researcher(p, study)?;
        self.store.write(|db| {
            let subject = db
                .subject_by_device(device_id)?
                .ok_or_else(|| HgError::not_found(format!("device {device_id}")))?;
            Self::owned(p, &subject.study_id)?;
            db.mint_token(&Self::device_cred(&subject, device_id))
        })
    }

    pub fn list_subjects(&self, p: &Principal, study: &StudyId) -> Result<Vec<Subject>> {
        Self::researcher(p, study)?;
        self.store.read(|db| db.list_subjects(study))
    }

    pub fn define_cohort(&self, p: &Principal, study: &StudyId, req: &NewCohort) -> Result<Cohort> {
        Self::researcher(p, study)?;
        self.store.write(|db| {
            let members: BTreeSet<SubjectId> = match &req.selector {
                CohortSelector::Explicit(ids) => {
                    for id in ids {
                        let s = db
                            .get_subject(id)?
                            .ok_or_else(|| HgError::not_found(format!("subject {id}")))?;
                        Self::owned(p, &s.study_id)?;
                    }
                    ids.iter().cloned().collect()
                }
                CohortSelector::Filter(clauses) => {
                    let subjects = db.list_subjects(study)?;
                    for c in clauses {
                        if !subjects.iter().any(|s| s.attributes.contains_key(&c.attr)) {
                            return Err(HgError::new(
                                ErrorCode::BadFilter,
                                format!("no subject in the study has attribute {:?}", c.attr),
                            ));
                        }
                    }
                    subjects
                        .into_iter()
                        .filter(|s| {
                            clauses
                                .iter()
                                .all(|c| s.attributes.get(&c.attr).is_some_and(|v| c.op.eval_attr(v, &c.value)))
                        })
                        .map(|s| s.subject_id)
                        .collect()
                }
            };
            let cohort = Cohort {
                cohort_id: CohortId::generate(),
                study_id: study.clone(),
                name: req.name.trim().to_string(),
                member_ids: members,
                origin: CohortOrigin::Manual,
                created_at: db.now,
            };
            check(EntityRef::Cohort(&cohort), db)?;
            db.insert_cohort(&cohort)?;
            Ok(cohort)
        })
    }

    pub fn list_cohorts(&self, p: &Principal, study: &StudyId) -> Result<Vec<Cohort>> {
        Self::researcher(p, study)?;
        self.store.read(|db| db.list_cohorts(study))
    }

    pub fn create_testset(&self, p: &Principal, study: &StudyId, req: &NewTestSet) -> Result<TestSet> {
        Self::researcher(p, study)?;
        let ts = TestSet {
            testset_id: TestSetId::generate(),
            study_id: study.clone(),
            name: req.name.trim().to_string(),
            tests: req
                .tests
                .iter()
                .map(|t| Test { test_id: TestId::generate(), kind: t.kind, params: t.params.clone() })
                .collect(),
        };
        self.store.write(|db| {
            check(EntityRef::TestSet(&ts), db)?;
            db.insert_testset(&ts)?;
            Ok(ts.clone())
        })
    }

    pub fn list_testsets(&self, p: &Principal, study: &StudyId) -> Result<Vec<TestSet>> {
        Self::researcher(p, study)?;
        self.store.read(|db| db.list_testsets(study))
    }

    pub fn create_task(&self, p: &Principal, study: &StudyId, req: &NewTask) -> Result<TaskCreated> {
        Self::researcher(p, study)?;
        self.store.write(|db| {
            let task = Task {
                task_id: TaskId::generate(),
                study_id: study.clone(),
                testset_id: req.testset_id.clone(),
                cohort_id: req.cohort_id.clone(),
                schedule: req.schedule.clone(),
                created_by: CreatedBy::Manual,
                created_at: db.now,
            };
            Self::insert_task(p, db, &task)
        })
    }

    fn insert_task(p: &Principal, db: &Db<'_>, task: &Task) -> Result<TaskCreated> {
        let ts = db
            .get_testset(&task.testset_id)?
            .ok_or_else(|| HgError::not_found(format!("test-set {}", task.testset_id)))?;
        Self::owned(p, &ts.study_id)?;
        let cohort = db
            .get_cohort(&task.cohort_id)?
            .ok_or_else(|| HgError::not_found(format!("cohort {}", task.cohort_id)))?;
        Self::owned(p, &cohort.study_id)?;
        check(EntityRef::Task(task), db)?;
        db.insert_task(task)?;
        let today = db.now.date();
        let slot = match task.schedule.mode {
            ScheduleMode::Once => Some(task.schedule.start_date.unwrap_or(today)),
            ScheduleMode::Daily => task.schedule.covers(today, today).then_some(today),
        };
        let occurrences = match slot {
            Some(date) => Self::materialize(db, task, &cohort, date)?,
            None => Vec::new(),
        };
        Ok(TaskCreated { task: task.clone(), occurrences })
    }

    /// One occurrence per cohort member for `date`; existing slots are kept.
    fn materialize(db: &Db<'_>, task: &Task, cohort: &Cohort, date: NaiveDate) -> Result<Vec<TaskOccurrence>> {
        let mut out = Vec::new();
        for subject in &cohort.member_ids {
            let occ = TaskOccurrence {
                occurrence_id: OccurrenceId::generate(),
                task_id: task.task_id.clone(),
                study_id: task.study_id.clone(),
                subject_id: subject.clone(),
                slot_date: date,
                due_window: task.schedule.window_on(date),
                status: OccurrenceStatus::Pending,
            };
            if db.insert_occurrence(&occ)? {
                out.push(occ);
            }
        }
        Ok(out)
    }

    pub fn list_tasks(&self, p: &Principal, study: &StudyId) -> Result<Vec<Task>> {
        Self::researcher(p, study)?;
        self.store.read(|db| db.list_tasks(study))
    }

    pub fn list_occurrences(&self, p: &Principal, study: &StudyId, f: &OccurrenceFilter) -> Result<Vec<TaskOccurrence>> {
        Self::researcher(p, study)?;
        self.store.read(|db| db.list_occurrences(study, f))
    }

    pub fn create_rule(&self, p: &Principal, study: &StudyId, req: &NewRule) -> Result<Rule> {
        Self::researcher(p, study)?;
        self.store.write(|db| {
            let rule = Rule {
                rule_id: RuleId::generate(),
                study_id: study.clone(),
                name: req.name.trim().to_string(),
                trigger: req.trigger.clone(),
                predicate: req.predicate.clone(),
                action: req.action.clone(),
                active: req.active,
                created_at: db.now,
            };
            let ts = db
                .get_testset(&rule.action.target_testset_id)?
                .ok_or_else(|| HgError::not_found(format!("test-set {}", rule.action.target_testset_id)))?;
            Self::owned(p, &ts.study_id)?;
            let c = db
                .get_cohort(&rule.action.source_cohort_id)?
                .ok_or_else(|| HgError::not_found(format!("cohort {}", rule.action.source_cohort_id)))?;
            Self::owned(p, &c.study_id)?;
            check(EntityRef::Rule(&rule), db)?;
            db.insert_rule(&rule)?;
            Ok(rule)
        })
    }

    pub fn list_rules(&self, p: &Principal, study: &StudyId) -> Result<Vec<Rule>> {
        Self::researcher(p, study)?;
        self.store.read(|db| db.list_rules(study))
    }

    pub fn rule_runs(&self, p: &Principal, study: &StudyId, rule: &RuleId) -> Result<Vec<RuleRun>> {
        Self::researcher(p, study)?;
        self.store.read(|db| {
            let r = db.get_rule(rule)?.ok_or_else(|| HgError::not_found(format!("rule {rule}")))?;
            Self::owned(p, &r.study_id)?;
            db.rule_runs(rule)
        })
    }

    /// Evaluates `rule` for `day` (default: today) right away.
    pub fn evaluate_rule_now(
        &self,
        p: &Principal,
        study: &StudyId,
        rule_id: &RuleId,
        day: Option<NaiveDate>,
    ) -> Result<RuleEvaluation> {
        Self::researcher(p, study)?;
        self.store.write(|db| {
            let rule = db.get_rule(rule_id)?.ok_or_else(|| HgError::not_found(format!("rule {rule_id}")))?;
            Self::owned(p, &rule.study_id)?;
            let day = day.unwrap_or(db.now.date());
            Self::evaluate(db, &rule, day, None)
        })
    }

    /// Runs `rule` for `day` once. Results come from datapoints uploaded on
    /// `day` (on-result) or the latest per subject up to `fire_at` (daily).
    fn evaluate(db: &Db<'_>, rule: &Rule, day: NaiveDate, fire_at: Option<Timestamp>) -> Result<RuleEvaluation> {
        if let Some(run) = db.rule_runs(&rule.rule_id)?.into_iter().find(|r| r.day == day) {
            let members = match &run.cohort_id {
                Some(c) => db.get_cohort(c)?.map(|c| c.member_ids).unwrap_or_default(),
                None => BTreeSet::new(),
            };
            return Ok(RuleEvaluation { run, members, fresh: false });
        }
        let source = db
            .get_cohort(&rule.action.source_cohort_id)?
            .ok_or_else(|| HgError::not_found(format!("cohort {}", rule.action.source_cohort_id)))?;
        let kind = trigger_kind(rule)
            .ok_or_else(|| HgError::validation(format!("rule {} has no known worker kind", rule.rule_id)))?;
        let results = match fire_at {
            None => db.results_for_upload_day(&rule.study_id, kind.worker_kind(), day)?,
            Some(at) => db.list_results(
                &rule.study_id,
                &ResultFilter { test_kind: Some(kind), to: Some(at.plus_millis(1)), ..Default::default() },
            )?,
        };
        let members = rule_members(rule, &source.member_ids, &results);
        let mut run = RuleRun {
            rule_id: rule.rule_id.clone(),
            day,
            ran_at: db.now,
            cohort_id: None,
            task_id: None,
            matched: members.len(),
        };
        if !members.is_empty() {
            let cohort = Cohort {
                cohort_id: CohortId::generate(),
                study_id: rule.study_id.clone(),
                name: format!("{} {day}", rule.action.sub_cohort_name),
                member_ids: members.clone(),
                origin: CohortOrigin::RuleDerived { rule_id: rule.rule_id.clone(), day },
                created_at: db.now,
            };
            db.insert_cohort(&cohort)?;
            let next = day.succ_opt().unwrap_or(day);
            let task = Task {
                task_id: TaskId::generate(),
                study_id: rule.study_id.clone(),
                testset_id: rule.action.target_testset_id.clone(),
                cohort_id: cohort.cohort_id.clone(),
                schedule: Schedule {
                    mode: ScheduleMode::Once,
                    window_start: rule.action.window_start,
                    window_end: rule.action.window_end,
                    start_date: Some(next),
                    end_date: None,
                },
                created_by: CreatedBy::Rule { rule_id: rule.rule_id.clone() },
                created_at: db.now,
            };
            let owner = Principal::Researcher { study_id: rule.study_id.clone() };
            Self::insert_task(&owner, db, &task)?;
            run.cohort_id = Some(cohort.cohort_id);
            run.task_id = Some(task.task_id);
        }
        if !db.record_rule_run(&run)? {
            return Err(HgError::conflict("rule already ran for this day"));
        }
        Ok(RuleEvaluation { run, members, fresh: true })
    }

    /// One scheduler pass at the store clock's current time.
    pub fn tick(&self, flush: bool) -> Result<TickReport> {
        let now = self.now();
        let today = now.date();
        let materialized = self.store.write(|db| {
            let mut n = 0;
            for task in db.daily_tasks()? {
                if !task.schedule.covers(today, task.created_at.date()) {
                    continue;
                }
                if let Some(cohort) = db.get_cohort(&task.cohort_id)? {
                    n += Self::materialize(db, &task, &cohort, today)?.len();
                }
            }
            Ok(n)
        })?;
        let expired = self.store.write(|db| db.expire_occurrences(db.now))?;
        let published = self
            .store
            .publish_datasets(flush)?
            .into_iter()
            .map(|(d, _)| d.dataset_id)
            .collect();
        let mut rule_runs = Vec::new();
        for rule in self.store.read(|db| db.all_rules())? {
            if !rule.active {
                continue;
            }
            match self.run_due(&rule, now) {
                Ok(mut runs) => rule_runs.append(&mut runs),
                Err(e) => tracing::warn!(rule = %rule.rule_id, error = %e, "rule evaluation failed"),
            }
        }
        Ok(TickReport { now, materialized, expired, published, rule_runs })
    }

    /// Evaluates every day the rule is due for and has not run yet.
    fn run_due(&self, rule: &Rule, now: Timestamp) -> Result<Vec<RuleRun>> {
        let Some(kind) = trigger_kind(rule) else {
            return Ok(Vec::new());
        };
        let today = now.date();
        let mut day = rule.created_at.date();
        let mut out = Vec::new();
        while day <= today {
            let due = match &rule.trigger {
                Trigger::OnResult { .. } => day < today,
                Trigger::Daily { at } => now >= Timestamp::at(day, *at),
            };
            if !due {
                break;
            }
            let done = self.store.write(|db| {
                if db.rule_ran(&rule.rule_id, day)? {
                    return Ok(None);
                }
                let fire_at = match &rule.trigger {
                    Trigger::OnResult { .. } => {
                        if !db.day_settled(&rule.study_id, kind, day)? {
                            return Ok(Some(None));
                        }
                        None
                    }
                    Trigger::Daily { at } => Some(Timestamp::at(day, *at)),
                };
                Self::evaluate(db, rule, day, fire_at).map(|e| Some(Some(e.run)))
            })?;
            match done {
                // Results still in flight; later days wait too.
                Some(None) => break,
                Some(Some(run)) => out.push(run),
                None => {}
            }
            day = match day.succ_opt() {
                Some(d) => d,
                None => break,
            };
        }
        Ok(out)
    }

    /// Pending or delivered occurrences of the device's subject whose window
    /// contains `now`; pending ones become delivered.
    pub fn poll_tasks(&self, p: &Principal, device_id: &str, now: Option<Timestamp>) -> Result<Vec<OccurrenceDescriptor>> {
        self.store.write(|db| {
            let subject = match p {
                Principal::Device { device_id: own, .. } if own != device_id => {
                    return Err(HgError::forbidden("device credential is bound to another device"));
                }
                Principal::Worker => return Err(forbidden()),
                _ => db
                    .subject_by_device(device_id)?
                    .ok_or_else(|| HgError::not_found(format!("device {device_id}")))?,
            };
            Self::owned(p, &subject.study_id)?;
            let at = now.unwrap_or(db.now);
            let mut out = Vec::new();
            for occ in db.due_occurrences(&subject.subject_id, at)? {
                let task = db.get_task(&occ.task_id)?.ok_or_else(|| HgError::internal("occurrence without task"))?;
                let ts = db
                    .get_testset(&task.testset_id)?
                    .ok_or_else(|| HgError::internal("task without test-set"))?;
                let mut status = occ.status;
                if status == OccurrenceStatus::Pending
                    && db.cas_occurrence(&occ.occurrence_id, &[OccurrenceStatus::Pending], OccurrenceStatus::Delivered)?
                {
                    status = OccurrenceStatus::Delivered;
                }
                out.push(OccurrenceDescriptor {
                    occurrence_id: occ.occurrence_id,
                    task_id: occ.task_id,
                    study_id: occ.study_id,
                    subject_id: occ.subject_id,
                    due_window: occ.due_window,
                    status,
                    testset_name: ts.name,
                    tests: ts.tests,
                });
            }
            Ok(out)
        })
    }

    pub fn upload(&self, p: &Principal, env: &UploadEnvelope) -> Result<Ingested> {
        let Principal::Device { subject_id, .. } = p else {
            return Err(HgError::forbidden("device credential required"));
        };
        if env.idempotency_key.is_empty() || env.idempotency_key.len() > 200 {
            return Err(HgError::validation("idempotency_key must be 1..=200 bytes"));
        }
        self.store.ingest(subject_id, env)
    }

    /// Results of a study, ascending by production time. Devices only see
    /// their own subject.
    pub fn list_results(&self, p: &Principal, study: &StudyId, q: &ResultQuery) -> Result<Vec<AnalyticResult>> {
        Self::owned(p, study)?;
        let mut f = ResultFilter { subject_id: q.subject.clone(), from: q.from, to: q.to, ..Default::default() };
        if let Principal::Device { subject_id, .. } = p {
            match &f.subject_id {
                Some(s) if s != subject_id => return Err(HgError::forbidden("device may only read its own subject")),
                _ => f.subject_id = Some(subject_id.clone()),
            }
        }
        self.store.read(|db| {
            if let Some(s) = &f.subject_id {
                let subject = db.get_subject(s)?.ok_or_else(|| HgError::not_found(format!("subject {s}")))?;
                Self::owned(p, &subject.study_id)?;
            }
            if let Some(t) = &q.test {
                if let Some(k) = TestKind::parse(t).or_else(|| TestKind::from_worker_kind(t)) {
                    f.test_kind = Some(k);
                } else {
                    let id = TestId::from(t.clone());
                    let r = db.get_test(&id)?.ok_or_else(|| HgError::not_found(format!("test {t}")))?;
                    Self::owned(p, &r.study_id)?;
                    f.test_id = Some(id);
                }
            }
            db.list_results(study, &f)
        })
    }

    pub fn submit_result(&self, p: &Principal, req: &SubmitResult) -> Result<AnalyticResult> {
        Self::worker(p)?;
        if TestKind::from_worker_kind(&req.worker_kind).is_none() {
            return Err(HgError::validation(format!("unknown worker kind {:?}", req.worker_kind)));
        }
        self.store.write(|db| {
            let dp = db
                .get_datapoint(&req.datapoint_id)?
                .ok_or_else(|| HgError::not_found(format!("datapoint {}", req.datapoint_id)))?;
            let dataset = db.datapoint_dataset(&dp.datapoint_id)?;
            if let Some(d) = &req.dataset_id
                && Some(d) != dataset.as_ref()
            {
                return Err(HgError::not_found(format!("dataset {d} does not contain the datapoint")));
            }
            let result = AnalyticResult {
                result_id: ResultId::generate(),
                study_id: dp.study_id.clone(),
                dataset_id: dataset,
                datapoint_id: Some(dp.datapoint_id.clone()),
                subject_id: dp.subject_id.clone(),
                worker_kind: req.worker_kind.clone(),
                schema_version: req.schema_version,
                produced_at: db.now,
                body: req.body.clone(),
            };
            check(EntityRef::Result(&result), db)?;
            db.upsert_result(&result, Some(&dp.test_id))
        })
    }

    pub fn claim(&self, p: &Principal, req: &ClaimRequest) -> Result<Option<ClaimedJob>> {
        Self::worker(p)?;
        let lease = req.lease_secs.unwrap_or(self.store.queue_config().default_lease_secs);
        self.store.write(|db| {
            let Some(job) = db.claim(&req.worker_kind, lease)? else {
                return Ok(None);
            };
            let dataset = db
                .get_dataset(&job.dataset_id)?
                .ok_or_else(|| HgError::internal(format!("job {} has no dataset", job.job_id)))?;
            let datapoints = db.dataset_datapoints(&job.dataset_id)?;
            Ok(Some(ClaimedJob { job, dataset, datapoints }))
        })
    }

    pub fn ack(&self, p: &Principal, job: &JobId, req: &AckRequest) -> Result<Job> {
        Self::worker(p)?;
        self.store.ack(job, req.lease_attempts, &req.outcome)
    }

    pub fn list_jobs(&self, p: &Principal, state: Option<hg_store::JobState>, kind: Option<&str>) -> Result<Vec<Job>> {
        Self::worker(p)?;
        self.store.read(|db| db.list_jobs(state, kind))
    }

    pub fn queue_stats(&self, p: &Principal) -> Result<QueueStats> {
        Self::worker(p)?;
        self.store.queue_stats()
    }

    /// Object bytes, for workers or the owning study's researcher.
    pub fn object(&self, p: &Principal, digest: &str) -> Result<Vec<u8>> {
        match p {
            Principal::Worker => {}
            Principal::Researcher { study_id } => {
                let owned = self.store.read(|db| {
                    Ok(db.list_datapoints(study_id)?.iter().any(
                        |d| matches!(&d.payload, Payload::File { object } if object.sha256 == digest),
                    ))
                })?;
                if !owned {
                    return Err(forbidden());
                }
            }
            Principal::Device { .. } => return Err(forbidden()),
        }
        self.store.objects().get(digest)
    }

    pub fn export(&self, p: &Principal, study: &StudyId) -> Result<ExportBundle> {
        Self::researcher(p, study)?;
        self.store.read(|db| {
            Ok(ExportBundle {
                study: db.get_study(study)?.ok_or_else(|| HgError::not_found(format!("study {study}")))?,
                results: db.list_results(study, &ResultFilter::default())?,
                datapoints: db.list_datapoints(study)?,
                vault: db.vault(study)?,
            })
        })
    }

    pub fn summary(&self, p: &Principal, study: &StudyId) -> Result<StudySummary> {
        Self::researcher(p, study)?;
        self.store.read(|db| {
            let s = db.get_study(study)?.ok_or_else(|| HgError::not_found(format!("study {study}")))?;
            let cohorts = db
                .list_cohorts(study)?
                .into_iter()
                .map(|c| CohortSummary { cohort_id: c.cohort_id, name: c.name, members: c.member_ids.len(), origin: c.origin })
                .collect();
            let mut tasks = Vec::new();
            for t in db.list_tasks(study)? {
                let mut tally: BTreeMap<OccurrenceStatus, u64> = OccurrenceStatus::ALL.iter().map(|s| (*s, 0)).collect();
                let f = OccurrenceFilter { task_id: Some(t.task_id.clone()), ..Default::default() };
                for o in db.list_occurrences(study, &f)? {
                    *tally.entry(o.status).or_default() += 1;
                }
                tasks.push(TaskSummary {
                    task_id: t.task_id,
                    testset_id: t.testset_id,
                    cohort_id: t.cohort_id,
                    mode: t.schedule.mode,
                    occurrences: tally,
                });
            }
            let mut rules = Vec::new();
            for r in db.list_rules(study)? {
                let runs = db.rule_runs(&r.rule_id)?;
                rules.push(RuleSummary {
                    last_fired_at: runs.iter().filter(|x| x.cohort_id.is_some()).map(|x| x.ran_at).max(),
                    runs: runs.len(),
                    rule_id: r.rule_id,
                    name: r.name,
                    active: r.active,
                });
            }
            Ok(StudySummary {
                study: s,
                counts: db.counts(study)?.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                occurrences: db.occurrence_counts(study)?,
                cohorts,
                tasks,
                rules,
            })
        })
    }
}
