//! Declarative study manifests.
//!
//! A manifest names every entity; names are the idempotency keys, so
//! applying the same file twice creates nothing the second time. Subjects
//! are matched by raw id through the pseudonym vault, tasks by their full
//! definition.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use hg_core::model::*;
use hg_core::{ErrorCode, HgError, Result, SubjectId, TimeOfDay};
use hg_ctm::{Client, NewCohort, NewRule, NewSubject, NewTask, NewTest, NewTestSet};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub study: String,
    #[serde(default)]
    pub subjects: Vec<SubjectSpec>,
    #[serde(default)]
    pub cohorts: Vec<CohortSpec>,
    #[serde(default)]
    pub testsets: Vec<TestSetSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub raw_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttrValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Members {
    /// `all`: every subject of the study at apply time.
    Keyword(String),
    RawIds(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Members>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<Vec<AttrFilter>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub kind: TestKind,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSetSpec {
    pub name: String,
    pub tests: Vec<TestSpec>,
}

fn default_window() -> [TimeOfDay; 2] {
    [TimeOfDay::hms(9, 0, 0).expect("valid"), TimeOfDay::hms(21, 0, 0).expect("valid")]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub testset: String,
    pub cohort: String,
    pub mode: ScheduleMode,
    #[serde(default = "default_window")]
    pub window: [TimeOfDay; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_date: Option<NaiveDate>,
}

impl TaskSpec {
    fn schedule(&self) -> Schedule {
        Schedule {
            mode: self.mode,
            window_start: self.window[0],
            window_end: self.window[1],
            start_date: self.start_date,
            end_date: self.end_date,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub metric: String,
    pub op: Comparator,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub name: String,
    /// Worker kind whose results fire the rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub daily_at: Option<TimeOfDay>,
    pub when: Condition,
    /// Test-set assigned to matching subjects.
    pub assign: String,
    pub source_cohort: String,
    pub sub_cohort: String,
    #[serde(default = "default_window")]
    pub window: [TimeOfDay; 2],
    #[serde(default = "yes")]
    pub active: bool,
}

fn yes() -> bool {
    true
}

impl RuleSpec {
    fn trigger(&self) -> Trigger {
        match (&self.on_result, self.daily_at) {
            (Some(kind), _) => Trigger::OnResult { worker_kind: kind.clone() },
            (None, Some(at)) => Trigger::Daily { at },
            (None, None) => unreachable!("checked by validate"),
        }
    }
}

/// 1-based line of `key` inside item `index` of top-level list `section`,
/// falling back to the item line and then the section line.
pub fn locate(src: &str, section: &str, index: usize, key: Option<&str>) -> Option<usize> {
    let lines: Vec<&str> = src.lines().collect();
    let head = lines.iter().position(|l| l.trim_end() == format!("{section}:"))?;
    let mut item_indent = None;
    let mut seen = 0usize;
    let mut item_line = None;
    for (i, l) in lines.iter().enumerate().skip(head + 1) {
        let trimmed = l.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let indent = l.len() - trimmed.len();
        if indent == 0 && !trimmed.starts_with('-') {
            break;
        }
        if trimmed.starts_with("- ") || trimmed == "-" {
            let at = *item_indent.get_or_insert(indent);
            if indent == at {
                if item_line.is_some() {
                    break;
                }
                if seen == index {
                    item_line = Some(i);
                    if let Some(k) = key
                        && trimmed[1..].trim_start().starts_with(&format!("{k}:"))
                    {
                        return Some(i + 1);
                    }
                }
                seen += 1;
                continue;
            }
        }
        if item_line.is_some()
            && let Some(k) = key
            && trimmed.starts_with(&format!("{k}:"))
        {
            return Some(i + 1);
        }
    }
    item_line.map(|i| i + 1).or(Some(head + 1))
}

struct Problems<'a> {
    src: &'a str,
    list: Vec<String>,
}

impl Problems<'_> {
    fn add(&mut self, section: &str, index: usize, key: &str, msg: impl std::fmt::Display) {
        let line = locate(self.src, section, index, Some(key)).map_or_else(String::new, |l| format!("line {l}: "));
        self.list.push(format!("{line}{section}[{index}].{key}: {msg}"));
    }
}

impl Manifest {
    /// Parses YAML and checks every cross reference. Errors name the field
    /// and its line.
    pub fn parse(src: &str) -> Result<Self> {
        let m: Manifest = serde_yaml::from_str(src).map_err(|e| HgError::validation(format!("manifest: {e}")))?;
        m.validate(src)?;
        Ok(m)
    }

    pub fn validate(&self, src: &str) -> Result<()> {
        let mut p = Problems { src, list: Vec::new() };
        if self.study.trim().is_empty() {
            p.list.push("study: must not be empty".into());
        }
        let mut raw = BTreeSet::new();
        for (i, s) in self.subjects.iter().enumerate() {
            if s.raw_id.trim().is_empty() {
                p.add("subjects", i, "raw_id", "must not be empty");
            } else if !raw.insert(s.raw_id.as_str()) {
                p.add("subjects", i, "raw_id", format!("duplicate raw id {:?}", s.raw_id));
            }
        }
        let mut cohorts = BTreeSet::new();
        for (i, c) in self.cohorts.iter().enumerate() {
            if !cohorts.insert(c.name.as_str()) {
                p.add("cohorts", i, "name", format!("duplicate cohort {:?}", c.name));
            }
            match (&c.members, &c.filter) {
                (Some(_), Some(_)) | (None, None) => {
                    p.add("cohorts", i, "members", "give exactly one of members or filter")
                }
                (Some(Members::Keyword(k)), None) if k != "all" => {
                    p.add("cohorts", i, "members", format!("expected \"all\" or a list of raw ids, got {k:?}"))
                }
                (Some(Members::RawIds(ids)), None) => {
                    for id in ids.iter().filter(|id| !raw.contains(id.as_str())) {
                        p.add("cohorts", i, "members", format!("unknown subject {id:?}"));
                    }
                }
                (None, Some(f)) if f.is_empty() => p.add("cohorts", i, "filter", "must not be empty"),
                _ => {}
            }
        }
        let mut testsets = BTreeSet::new();
        for (i, t) in self.testsets.iter().enumerate() {
            if !testsets.insert(t.name.as_str()) {
                p.add("testsets", i, "name", format!("duplicate test-set {:?}", t.name));
            }
            if t.tests.is_empty() {
                p.add("testsets", i, "tests", "must list at least one test");
            }
            for (j, test) in t.tests.iter().enumerate() {
                if let Err(e) = test.kind.validate_params(&test.params) {
                    p.add("testsets", i, "tests", format!("tests[{j}].params: {e}"));
                }
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if !testsets.contains(t.testset.as_str()) {
                p.add("tasks", i, "testset", format!("unknown test-set {:?}", t.testset));
            }
            if !cohorts.contains(t.cohort.as_str()) {
                p.add("tasks", i, "cohort", format!("unknown cohort {:?}", t.cohort));
            }
            if t.window[0] >= t.window[1] {
                p.add("tasks", i, "window", "start must be before end");
            }
        }
        let mut rules = BTreeSet::new();
        for (i, r) in self.rules.iter().enumerate() {
            if !rules.insert(r.name.as_str()) {
                p.add("rules", i, "name", format!("duplicate rule {:?}", r.name));
            }
            match (&r.on_result, r.daily_at) {
                (Some(_), Some(_)) | (None, None) => {
                    p.add("rules", i, "on_result", "give exactly one of on_result or daily_at")
                }
                (Some(k), None) if TestKind::from_worker_kind(k).is_none() => {
                    p.add("rules", i, "on_result", format!("unknown worker kind {k:?}"))
                }
                _ => {}
            }
            if (r.on_result.is_some() ^ r.daily_at.is_some())
                && !self.rule_metrics(r).contains(&r.when.metric.as_str())
            {
                p.add("rules", i, "when", format!("unknown metric {:?}", r.when.metric));
            }
            if !testsets.contains(r.assign.as_str()) {
                p.add("rules", i, "assign", format!("unknown test-set {:?}", r.assign));
            }
            if !cohorts.contains(r.source_cohort.as_str()) {
                p.add("rules", i, "source_cohort", format!("unknown cohort {:?}", r.source_cohort));
            }
            if r.window[0] >= r.window[1] {
                p.add("rules", i, "window", "start must be before end");
            }
        }
        if p.list.is_empty() {
            Ok(())
        } else {
            Err(HgError::validation(p.list.join("\n")))
        }
    }

    fn rule_metrics(&self, r: &RuleSpec) -> Vec<&'static str> {
        match &r.on_result {
            Some(k) => TestKind::from_worker_kind(k).map(|k| k.metrics().to_vec()).unwrap_or_default(),
            None => TestKind::ALL.iter().flat_map(|k| k.metrics().iter().copied()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applied {
    pub name: String,
    pub id: String,
    pub created: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub study: Option<Applied>,
    pub subjects: Vec<Applied>,
    pub cohorts: Vec<Applied>,
    pub testsets: Vec<Applied>,
    pub tasks: Vec<Applied>,
    pub rules: Vec<Applied>,
    /// Entities created by this run.
    pub created: usize,
    /// Researcher token of a newly created study; shown once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub researcher_token: Option<String>,
    /// Tokens of newly bound devices, by raw subject id; shown once.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub device_tokens: BTreeMap<String, String>,
    /// Existing entities whose definition differs from the manifest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drift: Vec<String>,
}

impl ApplyReport {
    fn push(&mut self, list: fn(&mut Self) -> &mut Vec<Applied>, name: String, id: String, created: bool) {
        self.created += created as usize;
        list(self).push(Applied { name, id, created });
    }
}

/// Creates whatever the manifest names and the server lacks. Without a
/// token the study is created; with one, the token's study must carry the
/// manifest's name.
pub async fn apply(client: &Client, manifest: &Manifest) -> Result<ApplyReport> {
    let mut rep = ApplyReport::default();
    let (study, rc) = match client.token() {
        Some(_) => {
            let found = client
                .list_studies()
                .await?
                .into_iter()
                .find(|s| s.name == manifest.study)
                .ok_or_else(|| {
                    HgError::forbidden(format!("token does not belong to a study named {:?}", manifest.study))
                })?;
            rep.study = Some(Applied { name: found.name.clone(), id: found.study_id.to_string(), created: false });
            (found.study_id, client.clone())
        }
        None => {
            let made = client.create_study(&manifest.study).await.map_err(|e| {
                if e.code == ErrorCode::Conflict {
                    HgError::conflict(format!(
                        "study {:?} exists; pass its researcher token with --token to re-apply",
                        manifest.study
                    ))
                } else {
                    e
                }
            })?;
            rep.study = Some(Applied { name: manifest.study.clone(), id: made.study.study_id.to_string(), created: true });
            rep.created += 1;
            rep.researcher_token = Some(made.token.clone());
            (made.study.study_id, client.with_token(&made.token))
        }
    };

    let vault: BTreeMap<String, SubjectId> =
        rc.export(&study).await?.vault.into_iter().map(|v| (v.raw_id, v.pseudonym)).collect();
    let mut ids = vault.clone();
    for s in &manifest.subjects {
        if let Some(id) = vault.get(&s.raw_id) {
            rep.push(|r| &mut r.subjects, s.raw_id.clone(), id.to_string(), false);
            continue;
        }
        let made = rc
            .add_subject(
                &study,
                &NewSubject {
                    raw_id: Some(s.raw_id.clone()),
                    attributes: s.attributes.clone(),
                    device_id: s.device_id.clone(),
                },
            )
            .await?;
        if let Some(t) = made.device_token {
            rep.device_tokens.insert(s.raw_id.clone(), t);
        }
        ids.insert(s.raw_id.clone(), made.subject.subject_id.clone());
        rep.push(|r| &mut r.subjects, s.raw_id.clone(), made.subject.subject_id.to_string(), true);
    }

    let mut cohorts: BTreeMap<String, Cohort> =
        rc.list_cohorts(&study).await?.into_iter().map(|c| (c.name.clone(), c)).collect();
    for c in &manifest.cohorts {
        if let Some(have) = cohorts.get(&c.name) {
            rep.push(|r| &mut r.cohorts, c.name.clone(), have.cohort_id.to_string(), false);
            continue;
        }
        let selector = match (&c.members, &c.filter) {
            (Some(Members::RawIds(raw)), _) => CohortSelector::Explicit(raw.iter().map(|r| ids[r].clone()).collect()),
            (Some(Members::Keyword(_)), _) => {
                CohortSelector::Explicit(rc.list_subjects(&study).await?.into_iter().map(|s| s.subject_id).collect())
            }
            (None, Some(f)) => CohortSelector::Filter(f.clone()),
            (None, None) => unreachable!("checked by validate"),
        };
        let made = rc.define_cohort(&study, &NewCohort { name: c.name.clone(), selector }).await?;
        rep.push(|r| &mut r.cohorts, c.name.clone(), made.cohort_id.to_string(), true);
        cohorts.insert(c.name.clone(), made);
    }

    let mut testsets: BTreeMap<String, TestSet> =
        rc.list_testsets(&study).await?.into_iter().map(|t| (t.name.clone(), t)).collect();
    for t in &manifest.testsets {
        if let Some(have) = testsets.get(&t.name) {
            let kinds: Vec<TestKind> = have.tests.iter().map(|x| x.kind).collect();
            if kinds != t.tests.iter().map(|x| x.kind).collect::<Vec<_>>() {
                rep.drift.push(format!("test-set {:?} has tests {kinds:?} on the server", t.name));
            }
            rep.push(|r| &mut r.testsets, t.name.clone(), have.testset_id.to_string(), false);
            continue;
        }
        let req = NewTestSet {
            name: t.name.clone(),
            tests: t.tests.iter().map(|x| NewTest { kind: x.kind, params: x.params.clone() }).collect(),
        };
        let made = rc.create_testset(&study, &req).await?;
        rep.push(|r| &mut r.testsets, t.name.clone(), made.testset_id.to_string(), true);
        testsets.insert(t.name.clone(), made);
    }

    let mut tasks = rc.list_tasks(&study).await?;
    for t in &manifest.tasks {
        let testset_id = testsets[&t.testset].testset_id.clone();
        let cohort_id = cohorts[&t.cohort].cohort_id.clone();
        let schedule = t.schedule();
        let label = format!("{} -> {} ({:?})", t.testset, t.cohort, t.mode).to_lowercase();
        if let Some(have) = tasks.iter().find(|x| {
            x.created_by == CreatedBy::Manual
                && x.testset_id == testset_id
                && x.cohort_id == cohort_id
                && x.schedule == schedule
        }) {
            rep.push(|r| &mut r.tasks, label, have.task_id.to_string(), false);
            continue;
        }
        let made = rc.create_task(&study, &NewTask { testset_id, cohort_id, schedule }).await?;
        rep.push(|r| &mut r.tasks, label, made.task.task_id.to_string(), true);
        tasks.push(made.task);
    }

    let rules: BTreeMap<String, Rule> = rc.list_rules(&study).await?.into_iter().map(|r| (r.name.clone(), r)).collect();
    for r in &manifest.rules {
        if let Some(have) = rules.get(&r.name) {
            rep.push(|x| &mut x.rules, r.name.clone(), have.rule_id.to_string(), false);
            continue;
        }
        let req = NewRule {
            name: r.name.clone(),
            trigger: r.trigger(),
            predicate: Predicate { metric: r.when.metric.clone(), comparator: r.when.op, value: r.when.value },
            action: RuleAction {
                target_testset_id: testsets[&r.assign].testset_id.clone(),
                sub_cohort_name: r.sub_cohort.clone(),
                source_cohort_id: cohorts[&r.source_cohort].cohort_id.clone(),
                window_start: r.window[0],
                window_end: r.window[1],
            },
            active: r.active,
        };
        let made = rc.create_rule(&study, &req).await?;
        rep.push(|x| &mut x.rules, r.name.clone(), made.rule_id.to_string(), true);
    }
    Ok(rep)
}
