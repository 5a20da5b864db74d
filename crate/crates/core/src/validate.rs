//! Invariant checks for entities.
//!
//! Validation never fails; it returns the list of violated invariants as
//! machine-readable codes. Checks that need other entities (same-study
//! references) go through a [`Lookup`].

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{is_well_formed, EntityKind, StudyId};
use crate::model::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    MalformedId,
    EmptyName,
    CrossStudyMember,
    CrossStudyReference,
    UnknownReference,
    EmptyTestset,
    DuplicateTestId,
    BadTestParams,
    WindowOrder,
    DateOrder,
    UnknownMetric,
    UnknownWorkerKind,
    NonFiniteValue,
    BadObjectRef,
    EmptyIdempotencyKey,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).unwrap();
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    fn push(&mut self, code: ViolationCode, detail: impl Into<String>) {
        self.violations.push(Violation {
            code,
            detail: detail.into(),
        });
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("{}: {}", v.code, v.detail))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Resolves the owning study of a referenced entity.
pub trait Lookup {
    fn study_of(&self, kind: EntityKind, id: &str) -> Option<StudyId>;

    /// When false, unresolvable references are skipped rather than flagged.
    fn authoritative(&self) -> bool {
        true
    }
}

/// A lookup that knows nothing; only local invariants are checked.
pub struct NoLookup;

impl Lookup for NoLookup {
    fn study_of(&self, _: EntityKind, _: &str) -> Option<StudyId> {
        None
    }

    fn authoritative(&self) -> bool {
        false
    }
}

#[derive(Debug, Default, Clone)]
pub struct MapLookup(pub HashMap<(EntityKind, String), StudyId>);

impl MapLookup {
    pub fn insert(&mut self, kind: EntityKind, id: impl Into<String>, study: StudyId) {
        self.0.insert((kind, id.into()), study);
    }
}

impl Lookup for MapLookup {
    fn study_of(&self, kind: EntityKind, id: &str) -> Option<StudyId> {
        self.0.get(&(kind, id.to_owned())).cloned()
    }
}

/// Borrowed view over any validatable entity.
#[derive(Debug, Clone, Copy)]
pub enum EntityRef<'a> {
    Study(&'a Study),
    Subject(&'a Subject),
    Cohort(&'a Cohort),
    TestSet(&'a TestSet),
    Task(&'a Task),
    Schedule(&'a Schedule),
    Occurrence(&'a TaskOccurrence),
    Datapoint(&'a Datapoint),
    Dataset(&'a Dataset),
    Result(&'a AnalyticResult),
    Rule(&'a Rule),
}

struct Checker<'l> {
    out: Validation,
    lookup: &'l dyn Lookup,
}

impl Checker<'_> {
    fn id(&mut self, kind: EntityKind, id: &str) {
        if !is_well_formed(kind, id) {
            self.out
                .push(ViolationCode::MalformedId, format!("{id:?} is not a {kind:?} id"));
        }
    }

    fn name(&mut self, what: &str, name: &str) {
        if name.trim().is_empty() {
            self.out.push(ViolationCode::EmptyName, format!("{what} name is empty"));
        }
    }

    fn same_study(&mut self, owner: &StudyId, kind: EntityKind, id: &str, code: ViolationCode) {
        match self.lookup.study_of(kind, id) {
            Some(s) if &s != owner => self
                .out
                .push(code, format!("{id} belongs to {s}, expected {owner}")),
            None if self.lookup.authoritative() => self
                .out
                .push(ViolationCode::UnknownReference, format!("{id} does not exist")),
            _ => {}
        }
    }

    fn schedule(&mut self, s: &Schedule) {
        if s.window_start >= s.window_end {
            self.out.push(
                ViolationCode::WindowOrder,
                format!("window_start {} >= window_end {}", s.window_start, s.window_end),
            );
        }
        if let (Some(a), Some(b)) = (s.start_date, s.end_date) {
            if b < a {
                self.out
                    .push(ViolationCode::DateOrder, format!("end_date {b} < start_date {a}"));
            }
        }
    }
}

pub fn validate_entity(entity: EntityRef<'_>, lookup: &dyn Lookup) -> Validation {
    let mut c = Checker {
        out: Validation::default(),
        lookup,
    };
    match entity {
        EntityRef::Study(s) => {
            c.id(EntityKind::Study, s.study_id.as_str());
            c.name("study", &s.name);
        }
        EntityRef::Subject(s) => {
            c.id(EntityKind::Subject, s.subject_id.as_str());
            for (k, v) in &s.attributes {
                if matches!(v, AttrValue::Number(n) if !n.is_finite()) {
                    c.out
                        .push(ViolationCode::NonFiniteValue, format!("attribute {k} is not finite"));
                }
            }
        }
        EntityRef::Cohort(co) => {
            c.id(EntityKind::Cohort, co.cohort_id.as_str());
            c.name("cohort", &co.name);
            for m in &co.member_ids {
                c.same_study(
                    &co.study_id,
                    EntityKind::Subject,
                    m.as_str(),
                    ViolationCode::CrossStudyMember,
                );
            }
        }
        EntityRef::TestSet(ts) => {
            c.id(EntityKind::TestSet, ts.testset_id.as_str());
            c.name("test-set", &ts.name);
            if ts.tests.is_empty() {
                c.out.push(ViolationCode::EmptyTestset, "test-set has no tests");
            }
            let mut seen = HashSet::new();
            for t in &ts.tests {
                c.id(EntityKind::Test, t.test_id.as_str());
                if !seen.insert(&t.test_id) {
                    c.out
                        .push(ViolationCode::DuplicateTestId, format!("{} repeated", t.test_id));
                }
                if let Err(e) = t.kind.validate_params(&t.params) {
                    c.out.push(
                        ViolationCode::BadTestParams,
                        format!("{} ({}): {e}", t.test_id, t.kind),
                    );
                }
            }
        }
        EntityRef::Task(t) => {
            c.id(EntityKind::Task, t.task_id.as_str());
            c.schedule(&t.schedule);
            c.same_study(
                &t.study_id,
                EntityKind::TestSet,
                t.testset_id.as_str(),
                ViolationCode::CrossStudyReference,
            );
            c.same_study(
                &t.study_id,
                EntityKind::Cohort,
                t.cohort_id.as_str(),
                ViolationCode::CrossStudyReference,
            );
        }
        EntityRef::Schedule(s) => c.schedule(s),
        EntityRef::Occurrence(o) => {
            c.id(EntityKind::Occurrence, o.occurrence_id.as_str());
            if o.due_window.start >= o.due_window.end {
                c.out.push(ViolationCode::WindowOrder, "due window is empty");
            }
            c.same_study(
                &o.study_id,
                EntityKind::Subject,
                o.subject_id.as_str(),
                ViolationCode::CrossStudyReference,
            );
        }
        EntityRef::Datapoint(d) => {
            c.id(EntityKind::Datapoint, d.datapoint_id.as_str());
            if d.idempotency_key.is_empty() {
                c.out
                    .push(ViolationCode::EmptyIdempotencyKey, "idempotency_key is empty");
            }
            match &d.payload {
                Payload::Scalar { value } if !value.is_finite() => c
                    .out
                    .push(ViolationCode::NonFiniteValue, "scalar payload is not finite"),
                Payload::File { object } => {
                    let hex_ok = object.sha256.len() == 64
                        && object.sha256.bytes().all(|b| b.is_ascii_hexdigit());
                    if !hex_ok {
                        c.out.push(
                            ViolationCode::BadObjectRef,
                            format!("{:?} is not a sha256 digest", object.sha256),
                        );
                    }
                }
                _ => {}
            }
            c.same_study(
                &d.study_id,
                EntityKind::Subject,
                d.subject_id.as_str(),
                ViolationCode::CrossStudyReference,
            );
        }
        EntityRef::Dataset(ds) => {
            c.id(EntityKind::Dataset, ds.dataset_id.as_str());
            for dp in &ds.datapoint_ids {
                c.same_study(
                    &ds.study_id,
                    EntityKind::Datapoint,
                    dp.as_str(),
                    ViolationCode::CrossStudyReference,
                );
            }
        }
        EntityRef::Result(r) => {
            c.id(EntityKind::Result, r.result_id.as_str());
            if TestKind::from_worker_kind(&r.worker_kind).is_none() {
                c.out.push(
                    ViolationCode::UnknownWorkerKind,
                    format!("unknown worker kind {:?}", r.worker_kind),
                );
            }
        }
        EntityRef::Rule(r) => {
            c.id(EntityKind::Rule, r.rule_id.as_str());
            if let Trigger::OnResult { worker_kind } = &r.trigger {
                if TestKind::from_worker_kind(worker_kind).is_none() {
                    c.out.push(
                        ViolationCode::UnknownWorkerKind,
                        format!("unknown worker kind {worker_kind:?}"),
                    );
                }
            }
            if !r.allowed_metrics().contains(&r.predicate.metric.as_str()) {
                c.out.push(
                    ViolationCode::UnknownMetric,
                    format!("metric {:?} is not emitted by the trigger", r.predicate.metric),
                );
            }
            if !r.predicate.value.is_finite() {
                c.out
                    .push(ViolationCode::NonFiniteValue, "predicate value is not finite");
            }
            c.name("sub-cohort", &r.action.sub_cohort_name);
            if r.action.window_start >= r.action.window_end {
                c.out.push(ViolationCode::WindowOrder, "action window is empty");
            }
            c.same_study(
                &r.study_id,
                EntityKind::TestSet,
                r.action.target_testset_id.as_str(),
                ViolationCode::CrossStudyReference,
            );
            c.same_study(
                &r.study_id,
                EntityKind::Cohort,
                r.action.source_cohort_id.as_str(),
                ViolationCode::CrossStudyReference,
            );
        }
    }
    c.out
}
