//! The entity model: studies, subjects, cohorts, test-sets, tasks and their
//! occurrences, datapoints, datasets, results and rules.
//!
//! Field names are the snake_case JSON wire and storage names.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HgError, Result};
use crate::ids::*;
use crate::time::{TimeOfDay, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: StudyId,
    pub name: String,
    pub created_at: Timestamp,
}

/// Enrollment attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Bool(b) => write!(f, "{b}"),
            AttrValue::Number(n) => write!(f, "{n}"),
            AttrValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub subject_id: SubjectId,
    pub study_id: StudyId,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttrValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CohortOrigin {
    Manual,
    RuleDerived { rule_id: RuleId, day: NaiveDate },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub cohort_id: CohortId,
    pub study_id: StudyId,
    pub name: String,
    pub member_ids: BTreeSet<SubjectId>,
    pub origin: CohortOrigin,
    pub created_at: Timestamp,
}

/// Comparison operator used by rule predicates and cohort filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl Comparator {
    pub fn eval_f64(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Gt => lhs > rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Ne => lhs != rhs,
        }
    }

    fn eval_ord<T: PartialOrd + PartialEq>(self, lhs: &T, rhs: &T) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Gt => lhs > rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Ne => lhs != rhs,
        }
    }

    /// Compares attribute values of the same type. Mismatched types never
    /// satisfy a predicate, and booleans only support `==`/`!=`.
    pub fn eval_attr(self, lhs: &AttrValue, rhs: &AttrValue) -> bool {
        match (lhs, rhs) {
            (AttrValue::Number(a), AttrValue::Number(b)) => self.eval_f64(*a, *b),
            (AttrValue::Text(a), AttrValue::Text(b)) => self.eval_ord(a, b),
            (AttrValue::Bool(a), AttrValue::Bool(b)) => match self {
                Comparator::Eq => a == b,
                Comparator::Ne => a != b,
                _ => false,
            },
            _ => false,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
        })
    }
}

/// One clause of a cohort filter; a subject matches when every clause holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrFilter {
    pub attr: String,
    pub op: Comparator,
    pub value: AttrValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortSelector {
    Explicit(Vec<SubjectId>),
    Filter(Vec<AttrFilter>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Phq8,
    Tug,
    SitToStand,
}

impl TestKind {
    pub const ALL: [TestKind; 3] = [TestKind::Phq8, TestKind::Tug, TestKind::SitToStand];

    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Phq8 => "phq8",
            TestKind::Tug => "tug",
            TestKind::SitToStand => "sit_to_stand",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Name of the analytic worker that consumes datapoints of this kind.
    pub fn worker_kind(self) -> &'static str {
        match self {
            TestKind::Phq8 => "phq8",
            TestKind::Tug => "tug",
            TestKind::SitToStand => "sts",
        }
    }

    pub fn from_worker_kind(kind: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.worker_kind() == kind)
    }

    /// Upload schema id a datapoint of this kind must satisfy.
    pub fn payload_schema(self) -> &'static str {
        match self {
            TestKind::Phq8 => "phq8/v1",
            TestKind::Tug => "accel/v1",
            TestKind::SitToStand => "pose2d/v1",
        }
    }

    /// Scalar fields of the worker's result body usable as rule metrics.
    pub fn metrics(self) -> &'static [&'static str] {
        match self {
            TestKind::Phq8 => &["total_score"],
            TestKind::Tug => &["daily_mean"],
            TestKind::SitToStand => &["total_cycles", "total_hesitations"],
        }
    }

    /// The metric exported as the headline scalar of a result.
    pub fn headline_metric(self) -> &'static str {
        self.metrics()[0]
    }

    pub fn validate_params(self, params: &Value) -> std::result::Result<(), String> {
        let params = if params.is_null() {
            &Value::Object(Default::default())
        } else {
            params
        };
        let check = |r: std::result::Result<(), serde_json::Error>| r.map_err(|e| e.to_string());
        match self {
            TestKind::Phq8 => check(Phq8Params::deserialize(params).map(|_| ())),
            TestKind::Tug => {
                let p = TugParams::deserialize(params).map_err(|e| e.to_string())?;
                if !(p.min_walk_secs.is_finite() && p.min_walk_secs > 0.0) {
                    return Err("min_walk_secs must be > 0".into());
                }
                Ok(())
            }
            TestKind::SitToStand => {
                let p = StsParams::deserialize(params).map_err(|e| e.to_string())?;
                if p.cycles == 0 {
                    return Err("cycles must be >= 1".into());
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phq8Params {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TugParams {
    #[serde(default = "default_min_walk_secs")]
    pub min_walk_secs: f64,
}

fn default_min_walk_secs() -> f64 {
    30.0
}

impl Default for TugParams {
    fn default() -> Self {
        Self {
            min_walk_secs: default_min_walk_secs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StsParams {
    #[serde(default = "default_cycles")]
    pub cycles: u32,
}

fn default_cycles() -> u32 {
    5
}

impl Default for StsParams {
    fn default() -> Self {
        Self {
            cycles: default_cycles(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Test {
    pub test_id: TestId,
    pub kind: TestKind,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub testset_id: TestSetId,
    pub study_id: StudyId,
    pub name: String,
    pub tests: Vec<Test>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Once,
    Daily,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub window_start: TimeOfDay,
    pub window_end: TimeOfDay,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_date: Option<NaiveDate>,
}

impl Schedule {
    pub fn window_on(&self, date: NaiveDate) -> DueWindow {
        DueWindow {
            start: Timestamp::at(date, self.window_start),
            end: Timestamp::at(date, self.window_end),
        }
    }

    /// True when a daily schedule has a slot on `date`.
    pub fn covers(&self, date: NaiveDate, created: NaiveDate) -> bool {
        let first = self.start_date.unwrap_or(created);
        date >= first && self.end_date.is_none_or(|end| date <= end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CreatedBy {
    Manual,
    Rule { rule_id: RuleId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: TaskId,
    pub study_id: StudyId,
    pub testset_id: TestSetId,
    pub cohort_id: CohortId,
    pub schedule: Schedule,
    pub created_by: CreatedBy,
    pub created_at: Timestamp,
}

/// Half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DueWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl DueWindow {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccurrenceStatus {
    Pending,
    Delivered,
    Completed,
    Expired,
}

impl OccurrenceStatus {
    pub const ALL: [OccurrenceStatus; 4] = [
        OccurrenceStatus::Pending,
        OccurrenceStatus::Delivered,
        OccurrenceStatus::Completed,
        OccurrenceStatus::Expired,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OccurrenceStatus::Pending => "pending",
            OccurrenceStatus::Delivered => "delivered",
            OccurrenceStatus::Completed => "completed",
            OccurrenceStatus::Expired => "expired",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Allowed edges: pending→delivered and pending|delivered→completed or
    /// expired. An upload can arrive before the device ever polled.
    pub fn can_transition_to(self, next: OccurrenceStatus) -> bool {
        use OccurrenceStatus::*;
        matches!(
            (self, next),
            (Pending, Delivered) | (Pending | Delivered, Completed | Expired)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, OccurrenceStatus::Completed | OccurrenceStatus::Expired)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOccurrence {
    pub occurrence_id: OccurrenceId,
    pub task_id: TaskId,
    pub study_id: StudyId,
    pub subject_id: SubjectId,
    pub slot_date: NaiveDate,
    pub due_window: DueWindow,
    pub status: OccurrenceStatus,
}

/// Reference to an immutable blob in the content-addressed object store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectRef {
    pub sha256: String,
    pub size_bytes: u64,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Scalar { value: f64 },
    Text { text: String },
    File { object: ObjectRef },
}

impl Payload {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Payload::Scalar { .. } => "scalar",
            Payload::Text { .. } => "text",
            Payload::File { .. } => "file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datapoint {
    pub datapoint_id: DatapointId,
    pub study_id: StudyId,
    pub subject_id: SubjectId,
    pub occurrence_id: OccurrenceId,
    pub test_id: TestId,
    pub test_kind: TestKind,
    pub payload: Payload,
    pub collected_at: Timestamp,
    pub uploaded_at: Timestamp,
    pub idempotency_key: String,
    /// Set when the upload arrived after its occurrence expired.
    #[serde(default)]
    pub late: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStatus {
    Open,
    Published,
    Processed,
}

impl DatasetStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetStatus::Open => "open",
            DatasetStatus::Published => "published",
            DatasetStatus::Processed => "processed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Open, Self::Published, Self::Processed]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dataset_id: DatasetId,
    pub study_id: StudyId,
    pub testset_id: TestSetId,
    pub test_id: TestId,
    pub test_kind: TestKind,
    /// UTC day the member datapoints were uploaded.
    pub day: NaiveDate,
    pub datapoint_ids: Vec<DatapointId>,
    pub status: DatasetStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticResult {
    pub result_id: ResultId,
    pub study_id: StudyId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<DatasetId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datapoint_id: Option<DatapointId>,
    pub subject_id: SubjectId,
    pub worker_kind: String,
    pub schema_version: u32,
    pub produced_at: Timestamp,
    pub body: Value,
}

impl AnalyticResult {
    /// Numeric field `metric` of the body, if present.
    pub fn metric(&self, metric: &str) -> Option<f64> {
        self.body.get(metric).and_then(Value::as_f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trigger {
    OnResult { worker_kind: String },
    Daily { at: TimeOfDay },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub metric: String,
    pub comparator: Comparator,
    pub value: f64,
}

impl Predicate {
    pub fn holds(&self, observed: f64) -> bool {
        self.comparator.eval_f64(observed, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleAction {
    pub target_testset_id: TestSetId,
    pub sub_cohort_name: String,
    pub source_cohort_id: CohortId,
    /// Window of the created once-task, on the day after the trigger day.
    #[serde(default = "default_action_start")]
    pub window_start: TimeOfDay,
    #[serde(default = "default_action_end")]
    pub window_end: TimeOfDay,
}

fn default_action_start() -> TimeOfDay {
    TimeOfDay::hms(9, 0, 0).unwrap()
}

fn default_action_end() -> TimeOfDay {
    TimeOfDay::hms(21, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: RuleId,
    pub study_id: StudyId,
    #[serde(default)]
    pub name: String,
    pub trigger: Trigger,
    pub predicate: Predicate,
    pub action: RuleAction,
    pub active: bool,
    pub created_at: Timestamp,
}

impl Rule {
    /// Metrics the trigger's worker kind emits. Daily triggers accept the
    /// metric of any known worker kind.
    pub fn allowed_metrics(&self) -> Vec<&'static str> {
        match &self.trigger {
            Trigger::OnResult { worker_kind } => TestKind::from_worker_kind(worker_kind)
                .map(|k| k.metrics().to_vec())
                .unwrap_or_default(),
            Trigger::Daily { .. } => TestKind::ALL
                .iter()
                .flat_map(|k| k.metrics().iter().copied())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Researcher,
    Device,
    Worker,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Researcher => "researcher",
            Role::Device => "device",
            Role::Worker => "worker",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "researcher" => Ok(Role::Researcher),
            "device" => Ok(Role::Device),
            "worker" => Ok(Role::Worker),
            other => Err(HgError::validation(format!("unknown role {other:?}"))),
        }
    }
}
