use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use chrono::{Days, NaiveDate};
use hg_core::model::*;
use hg_core::payload::{PHQ8_SCHEMA, Phq8Document, Phq8Item, UploadEnvelope, UploadPayload};
use hg_core::{ErrorCode, HgError, Result, StudyId, SubjectId, TimeOfDay, Timestamp};
use hg_ctm::{Client, ExportBundle, NewCohort, NewRule, NewSubject, NewTask, NewTest, NewTestSet, OccurrenceDescriptor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Value, json};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::profile::{SubjectProfile, sample_profiles};
use crate::synth::{AccelOptions, Plateau, PoseOptions, synth_accel, synth_phq8, synth_pose, true_tug_seconds};

pub const EVERYONE: &str = "everyone";
pub const DAILY_MOOD: &str = "daily-mood";
pub const MOBILITY: &str = "mobility";
pub const SIT_TO_STAND: &str = "sit-to-stand";
pub const LOW_MOOD: &str = "low-mood";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub study_name: String,
    pub subjects: usize,
    pub compliance: f64,
    pub seed: u64,
    /// Adds the mobility test-set and a rule that schedules it for
    /// subjects whose PHQ-8 total is below `threshold`.
    pub with_rule: bool,
    pub threshold: f64,
    /// Adds a daily sit-to-stand test-set.
    pub with_sts: bool,
    /// Bounds of the daily tasks; open-ended when absent.
    pub start_date: Option<NaiveDate>,
    pub end_date: Option<NaiveDate>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            study_name: "sim".into(),
            subjects: 10,
            compliance: 1.0,
            seed: 0,
            with_rule: false,
            threshold: 10.0,
            with_sts: false,
            start_date: None,
            end_date: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Device {
    pub raw_id: String,
    pub device_id: String,
    pub subject_id: SubjectId,
    pub token: String,
    pub profile: SubjectProfile,
}

#[derive(Debug, Clone)]
pub struct FleetPlan {
    pub study_id: StudyId,
    pub study_name: String,
    pub researcher_token: String,
    pub devices: Vec<Device>,
}

fn window(mode: ScheduleMode, start_date: Option<NaiveDate>, end_date: Option<NaiveDate>) -> Schedule {
    Schedule {
        mode,
        window_start: TimeOfDay::hms(9, 0, 0).expect("valid time"),
        window_end: TimeOfDay::hms(21, 0, 0).expect("valid time"),
        start_date,
        end_date,
    }
}

/// Creates the study, one subject and device per profile, the
/// `everyone` cohort and the scenario's test-sets, tasks and rule.
pub async fn setup_study(client: &Client, scenario: &Scenario) -> Result<FleetPlan> {
    if !(0.0..=1.0).contains(&scenario.compliance) {
        return Err(HgError::validation("compliance must be in [0, 1]"));
    }
    let created = client.create_study(&scenario.study_name).await?;
    let study = created.study.study_id.clone();
    let rc = client.with_token(&created.token);
    let mut devices = Vec::with_capacity(scenario.subjects);
    for profile in sample_profiles(scenario.seed, scenario.subjects, scenario.compliance) {
        let device_id = format!("{}.{}", profile.raw_id, study);
        let made = rc
            .add_subject(
                &study,
                &NewSubject {
                    raw_id: Some(profile.raw_id.clone()),
                    attributes: BTreeMap::from([("age".to_string(), AttrValue::Number(profile.age as f64))]),
                    device_id: Some(device_id.clone()),
                },
            )
            .await?;
        let token = made
            .device_token
            .ok_or_else(|| HgError::internal("subject created without a device token"))?;
        devices.push(Device {
            raw_id: profile.raw_id.clone(),
            device_id,
            subject_id: made.subject.subject_id,
            token,
            profile,
        });
    }
    let everyone = rc
        .define_cohort(
            &study,
            &NewCohort {
                name: EVERYONE.into(),
                selector: CohortSelector::Explicit(devices.iter().map(|d| d.subject_id.clone()).collect()),
            },
        )
        .await?;
    let testset = |name: &str, kind: TestKind| NewTestSet {
        name: name.into(),
        tests: vec![NewTest { kind, params: json!({}) }],
    };
    let daily = |ts: &TestSet| NewTask {
        testset_id: ts.testset_id.clone(),
        cohort_id: everyone.cohort_id.clone(),
        schedule: window(ScheduleMode::Daily, scenario.start_date, scenario.end_date),
    };
    let mood = rc.create_testset(&study, &testset(DAILY_MOOD, TestKind::Phq8)).await?;
    rc.create_task(&study, &daily(&mood)).await?;
    if scenario.with_sts {
        let sts = rc.create_testset(&study, &testset(SIT_TO_STAND, TestKind::SitToStand)).await?;
        rc.create_task(&study, &daily(&sts)).await?;
    }
    if scenario.with_rule {
        let mobility = rc.create_testset(&study, &testset(MOBILITY, TestKind::Tug)).await?;
        rc.create_rule(
            &study,
            &NewRule {
                name: LOW_MOOD.into(),
                trigger: Trigger::OnResult { worker_kind: "phq8".into() },
                predicate: Predicate {
                    metric: "total_score".into(),
                    comparator: Comparator::Lt,
                    value: scenario.threshold,
                },
                action: RuleAction {
                    target_testset_id: mobility.testset_id,
                    sub_cohort_name: LOW_MOOD.into(),
                    source_cohort_id: everyone.cohort_id.clone(),
                    window_start: TimeOfDay::hms(9, 0, 0).expect("valid time"),
                    window_end: TimeOfDay::hms(21, 0, 0).expect("valid time"),
                },
                active: true,
            },
        )
        .await?;
    }
    Ok(FleetPlan {
        study_id: study,
        study_name: scenario.study_name.clone(),
        researcher_token: created.token,
        devices,
    })
}

#[derive(Debug, Clone)]
pub struct FleetOptions {
    pub days: u32,
    pub start: NaiveDate,
    /// Time of day at which every device polls and performs its tests.
    pub poll_at: TimeOfDay,
    pub max_in_flight: usize,
    /// Wall-clock limit for the queue to drain after a publish.
    pub settle_timeout: Duration,
    pub upload_retries: u32,
    /// Answer noise around each subject's latent PHQ-8 level.
    pub sigma: f64,
    pub accel: AccelOptions,
    pub pose: PoseOptions,
}

impl Default for FleetOptions {
    fn default() -> Self {
        Self {
            days: 3,
            start: NaiveDate::from_ymd_opt(2026, 3, 2).expect("valid date"),
            poll_at: TimeOfDay::hms(12, 0, 0).expect("valid time"),
            max_in_flight: 32,
            settle_timeout: Duration::from_secs(60),
            upload_retries: 3,
            sigma: 0.7,
            accel: AccelOptions::default(),
            pose: PoseOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truth {
    Phq8 { answers: [u8; 8], total: u8 },
    Tug { steps: usize, tug_seconds: f64 },
    Sts { cycles: usize, hesitations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub raw_id: String,
    pub day: u32,
    pub testset: String,
    pub idempotency_key: String,
    pub truth: Truth,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLog {
    pub entries: Vec<TruthEntry>,
}

impl GroundTruthLog {
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("truth entry serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub offered: u64,
    pub completed: u64,
    pub skipped: u64,
}

/// What the server holds after the run, keyed by raw ids only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerCheck {
    pub datapoints: u64,
    pub results: u64,
    pub occurrences: BTreeMap<OccurrenceStatus, u64>,
    pub sub_cohorts: BTreeMap<String, Vec<String>>,
    /// SHA-256 over the export with random ids replaced by raw ids and
    /// idempotency keys.
    pub fingerprint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub matched: u64,
    pub missing_datapoints: Vec<String>,
    pub unexpected_datapoints: Vec<String>,
    pub missing_results: Vec<String>,
    pub mismatched: Vec<String>,
    /// Mean absolute error of the TUG daily mean against the generator's
    /// label, over subjects with a TUG result.
    pub tug_mae: Option<f64>,
}

impl Reconciliation {
    pub fn is_clean(&self) -> bool {
        self.missing_datapoints.is_empty()
            && self.unexpected_datapoints.is_empty()
            && self.missing_results.is_empty()
            && self.mismatched.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub study_name: String,
    pub subjects: usize,
    pub days: u32,
    pub offered: u64,
    pub attempted: u64,
    pub completed: u64,
    pub skipped: u64,
    /// Attempted occurrences whose upload failed after retries, plus
    /// device polls that failed.
    pub missed: u64,
    /// Completed uploads per test kind.
    pub by_kind: BTreeMap<String, u64>,
    pub per_subject: BTreeMap<String, SubjectReport>,
    pub server: ServerCheck,
    pub reconciliation: Reconciliation,
}

#[derive(Debug, Clone)]
pub struct FleetOutcome {
    pub report: SimReport,
    pub truth: GroundTruthLog,
}

async fn settle(ops: &Client, timeout: Duration) -> Result<()> {
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        let s = ops.queue_stats().await?;
        if s.ready + s.leased == 0 {
            return Ok(());
        }
        if tokio::time::Instant::now() >= deadline {
            return Err(HgError::new(
                ErrorCode::Unavailable,
                format!("queue did not drain within {timeout:?} ({} ready, {} leased); are workers running?", s.ready, s.leased),
            ));
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
}

/// Moves the server clock to `to`, ticks, waits for the queue and ticks
/// again so rules for settled days run.
async fn advance(ops: &Client, to: Timestamp, timeout: Duration) -> Result<()> {
    if ops.clock().await? < to {
        ops.set_clock(to).await?;
    }
    ops.tick(false).await?;
    settle(ops, timeout).await?;
    ops.tick(false).await?;
    Ok(())
}

struct DeviceDay {
    entries: Vec<TruthEntry>,
    report: SubjectReport,
    attempted: u64,
    missed: u64,
    by_kind: BTreeMap<String, u64>,
}

fn file(doc: &impl Serialize) -> UploadPayload {
    UploadPayload::File {
        media_type: "application/json".into(),
        data_b64: base64::engine::general_purpose::STANDARD.encode(serde_json::to_vec(doc).expect("document serializes")),
    }
}

async fn retrying<T, F, Fut>(retries: u32, mut call: F) -> Result<T>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T>>,
{
    let mut attempt = 0;
    loop {
        match call().await {
            Err(e) if e.code == ErrorCode::Unavailable && attempt < retries => {
                attempt += 1;
                tokio::time::sleep(Duration::from_millis(50 << attempt)).await;
            }
            r => return r,
        }
    }
}

async fn poll(client: &Client, device_id: &str, retries: u32) -> Result<Vec<OccurrenceDescriptor>> {
    retrying(retries, || client.poll_tasks(device_id, None)).await
}

async fn upload(client: &Client, env: &UploadEnvelope, retries: u32) -> Result<()> {
    retrying(retries, || client.upload(env)).await.map(drop)
}

/// One device's day: poll, then for each delivered occurrence in test-set
/// name order flip the compliance coin and perform every test.
async fn device_day(
    client: Client,
    device: Device,
    rng: &mut ChaCha8Rng,
    day: u32,
    now: Timestamp,
    opts: &FleetOptions,
) -> Result<DeviceDay> {
    let mut out = DeviceDay {
        entries: Vec::new(),
        report: SubjectReport::default(),
        attempted: 0,
        missed: 0,
        by_kind: BTreeMap::new(),
    };
    let mut occs: Vec<OccurrenceDescriptor> = match poll(&client, &device.device_id, opts.upload_retries).await {
        Ok(o) => o,
        Err(e) if e.code == ErrorCode::Unavailable => {
            tracing::warn!(device = %device.device_id, error = %e, "poll failed");
            out.missed += 1;
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    occs.sort_by(|a, b| a.testset_name.cmp(&b.testset_name));
    let p = &device.profile;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for occ in occs {
        out.report.offered += 1;
        let i = seen.entry(occ.testset_name.clone()).or_default();
        let ordinal = *i;
        *i += 1;
        if !rng.random_bool(p.compliance_prob) {
            out.report.skipped += 1;
            continue;
        }
        out.attempted += 1;
        let mut ok = true;
        for (ti, test) in occ.tests.iter().enumerate() {
            let key = format!("{}/d{day}/{}/{ordinal}.{ti}", device.raw_id, occ.testset_name);
            let (payload, truth) = match test.kind {
                TestKind::Phq8 => {
                    let s = synth_phq8(p, opts.sigma, rng);
                    let doc = Phq8Document {
                        schema: PHQ8_SCHEMA.into(),
                        subject_id: occ.subject_id.clone(),
                        occurrence_id: occ.occurrence_id.clone(),
                        completed_at: now,
                        responses: (1..=8u8)
                            .map(|q| Phq8Item { question: q, answer: s.answers[q as usize - 1] })
                            .collect(),
                    };
                    let text = serde_json::to_string(&doc).expect("document serializes");
                    (UploadPayload::Text { text }, Truth::Phq8 { answers: s.answers, total: s.total })
                }
                TestKind::Tug => {
                    let params: TugParams = serde_json::from_value(test.params.clone()).unwrap_or_default();
                    let secs = p.gait.preferred_walk_secs.max(params.min_walk_secs);
                    let walk = synth_accel(&p.gait, secs, &AccelOptions { start_time: now, ..opts.accel }, rng)?;
                    let doc = walk.to_document(&occ.subject_id, &device.device_id);
                    let truth = Truth::Tug { steps: walk.step_times.len(), tug_seconds: true_tug_seconds(&p.gait) };
                    (file(&doc), truth)
                }
                TestKind::SitToStand => {
                    let params: StsParams = serde_json::from_value(test.params.clone()).unwrap_or_default();
                    let cycles = params.cycles.max(1) as usize;
                    let mut plateaus = Vec::new();
                    for c in 0..cycles {
                        if rng.random_bool(p.sts.plateau_rate) {
                            plateaus.push(Plateau { cycle: c, secs: rng.random_range(0.3..0.8) });
                        }
                    }
                    let pose = synth_pose(p, cycles, &plateaus, &opts.pose, rng)?;
                    let truth = Truth::Sts { cycles, hesitations: plateaus.len() };
                    (file(&pose.doc), truth)
                }
            };
            let env = UploadEnvelope {
                occurrence_id: occ.occurrence_id.clone(),
                test_id: test.test_id.clone(),
                idempotency_key: key.clone(),
                collected_at: now,
                clock_offset_ms: 0,
                payload,
            };
            match upload(&client, &env, opts.upload_retries).await {
                Ok(()) => {
                    *out.by_kind.entry(test.kind.as_str().to_string()).or_default() += 1;
                    out.entries.push(TruthEntry {
                        raw_id: device.raw_id.clone(),
                        day,
                        testset: occ.testset_name.clone(),
                        idempotency_key: key,
                        truth,
                    });
                }
                Err(e) => {
                    tracing::warn!(device = %device.device_id, error = %e, "upload failed");
                    ok = false;
                }
            }
        }
        if ok {
            out.report.completed += 1;
        } else {
            out.missed += 1;
        }
    }
    Ok(out)
}

/// Drives the plan through `opts.days` virtual days on a test-mode
/// server. Workers must be consuming the queue; every publish waits for
/// it to drain.
pub async fn run_fleet(client: &Client, operator_token: &str, plan: &FleetPlan, opts: &FleetOptions) -> Result<FleetOutcome> {
    if opts.max_in_flight == 0 {
        return Err(HgError::validation("max_in_flight must be at least 1"));
    }
    let ops = client.with_token(operator_token);
    let gate = Arc::new(Semaphore::new(opts.max_in_flight));
    let mut rngs: Vec<Option<ChaCha8Rng>> =
        plan.devices.iter().map(|d| Some(ChaCha8Rng::seed_from_u64(d.profile.seed))).collect();
    let mut report = SimReport {
        study_name: plan.study_name.clone(),
        subjects: plan.devices.len(),
        days: opts.days,
        ..SimReport::default()
    };
    for d in &plan.devices {
        report.per_subject.insert(d.raw_id.clone(), SubjectReport::default());
    }
    let mut truth = GroundTruthLog::default();
    let opts_arc = Arc::new(opts.clone());
    for day in 0..opts.days {
        let date = opts.start + Days::new(day as u64);
        advance(&ops, Timestamp::start_of(date), opts.settle_timeout).await?;
        let now = Timestamp::at(date, opts.poll_at);
        if ops.clock().await? < now {
            ops.set_clock(now).await?;
        }
        ops.tick(false).await?;

        let mut set = JoinSet::new();
        for (i, device) in plan.devices.iter().enumerate() {
            let mut rng = rngs[i].take().expect("rng returned after each day");
            let (device, gate, opts) = (device.clone(), gate.clone(), opts_arc.clone());
            let dc = client.with_token(&device.token);
            set.spawn(async move {
                let _permit = gate.acquire_owned().await.expect("semaphore open");
                let r = device_day(dc, device, &mut rng, day, now, &opts).await;
                (i, rng, r)
            });
        }
        let mut days: Vec<Option<DeviceDay>> = (0..plan.devices.len()).map(|_| None).collect();
        while let Some(joined) = set.join_next().await {
            let (i, rng, r) = joined.map_err(HgError::internal)?;
            rngs[i] = Some(rng);
            days[i] = Some(r?);
        }
        for (device, dd) in plan.devices.iter().zip(days) {
            let dd = dd.expect("every device reported");
            let s = report.per_subject.get_mut(&device.raw_id).expect("subject registered");
            s.offered += dd.report.offered;
            s.completed += dd.report.completed;
            s.skipped += dd.report.skipped;
            report.offered += dd.report.offered;
            report.completed += dd.report.completed;
            report.skipped += dd.report.skipped;
            report.attempted += dd.attempted;
            report.missed += dd.missed;
            for (k, n) in dd.by_kind {
                *report.by_kind.entry(k).or_default() += n;
            }
            truth.entries.extend(dd.entries);
        }
    }
    let end = opts.start + Days::new(opts.days as u64);
    advance(&ops, Timestamp::start_of(end), opts.settle_timeout).await?;

    let rc = client.with_token(&plan.researcher_token);
    let export = rc.export(&plan.study_id).await?;
    let summary = rc.summary(&plan.study_id).await?;
    let cohorts = rc.list_cohorts(&plan.study_id).await?;
    report.server = server_check(&export, &summary.occurrences, &cohorts);
    report.reconciliation = reconcile(&truth, &export);
    Ok(FleetOutcome { report, truth })
}

fn raw_ids(export: &ExportBundle) -> BTreeMap<&SubjectId, &str> {
    export.vault.iter().map(|v| (&v.pseudonym, v.raw_id.as_str())).collect()
}

pub fn server_check(
    export: &ExportBundle,
    occurrences: &BTreeMap<OccurrenceStatus, u64>,
    cohorts: &[Cohort],
) -> ServerCheck {
    let raw = raw_ids(export);
    let name = |s: &SubjectId| raw.get(s).map_or_else(|| s.to_string(), |r| r.to_string());
    let key_of: BTreeMap<_, _> = export
        .datapoints
        .iter()
        .map(|d| (&d.datapoint_id, d.idempotency_key.as_str()))
        .collect();
    let mut dps: Vec<Value> = export
        .datapoints
        .iter()
        .map(|d| {
            json!({
                "subject": name(&d.subject_id),
                "key": d.idempotency_key,
                "kind": d.test_kind,
                "collected_at": d.collected_at,
            })
        })
        .collect();
    dps.sort_by(|a, b| a["key"].as_str().cmp(&b["key"].as_str()));
    let mut results: Vec<Value> = export
        .results
        .iter()
        .map(|r| {
            json!({
                "subject": name(&r.subject_id),
                "key": r.datapoint_id.as_ref().and_then(|d| key_of.get(d)).copied(),
                "worker_kind": r.worker_kind,
                "schema_version": r.schema_version,
                "body": r.body,
            })
        })
        .collect();
    results.sort_by_key(|v| v.to_string());
    let mut sub_cohorts = BTreeMap::new();
    for c in cohorts {
        if matches!(c.origin, CohortOrigin::RuleDerived { .. }) {
            let mut members: Vec<String> = c.member_ids.iter().map(name).collect();
            members.sort();
            sub_cohorts.insert(c.name.clone(), members);
        }
    }
    let canonical = json!({"datapoints": dps, "results": results, "sub_cohorts": sub_cohorts});
    ServerCheck {
        datapoints: export.datapoints.len() as u64,
        results: export.results.len() as u64,
        occurrences: occurrences.clone(),
        sub_cohorts,
        fingerprint: hex::encode(Sha256::digest(canonical.to_string().as_bytes())),
    }
}

/// Matches the ground truth log against an export: every truth entry has a
/// datapoint for the right subject and a result agreeing with it, and no
/// datapoint lacks a truth entry.
pub fn reconcile(truth: &GroundTruthLog, export: &ExportBundle) -> Reconciliation {
    let raw = raw_ids(export);
    let by_key: BTreeMap<&str, &Datapoint> =
        export.datapoints.iter().map(|d| (d.idempotency_key.as_str(), d)).collect();
    let by_dp: BTreeMap<_, _> = export
        .results
        .iter()
        .filter_map(|r| r.datapoint_id.as_ref().map(|d| (d, r)))
        .collect();
    let mut out = Reconciliation::default();
    let mut tug_err = Vec::new();
    let mut tug_seen = BTreeSet::new();
    for e in &truth.entries {
        let key = e.idempotency_key.as_str();
        let Some(dp) = by_key.get(key) else {
            out.missing_datapoints.push(key.to_string());
            continue;
        };
        if raw.get(&dp.subject_id).copied() != Some(e.raw_id.as_str()) {
            out.mismatched.push(format!("{key}: datapoint belongs to another subject"));
            continue;
        }
        let Some(r) = by_dp.get(&dp.datapoint_id) else {
            out.missing_results.push(key.to_string());
            continue;
        };
        let agrees = match &e.truth {
            Truth::Phq8 { total, .. } => r.body["total_score"].as_u64() == Some(*total as u64),
            Truth::Sts { cycles, .. } => r.body["total_cycles"].as_u64() == Some(*cycles as u64),
            Truth::Tug { tug_seconds, .. } => {
                if let Some(m) = r.body["daily_mean"].as_f64()
                    && tug_seen.insert((e.raw_id.as_str(), e.day))
                {
                    tug_err.push((m - tug_seconds).abs());
                }
                r.body["predictions"].is_array()
            }
        };
        if agrees {
            out.matched += 1;
        } else {
            out.mismatched.push(format!("{key}: result {} disagrees with {:?}", r.body, e.truth));
        }
    }
    let known: BTreeSet<&str> = truth.entries.iter().map(|e| e.idempotency_key.as_str()).collect();
    out.unexpected_datapoints = export
        .datapoints
        .iter()
        .filter(|d| !known.contains(d.idempotency_key.as_str()))
        .map(|d| d.idempotency_key.clone())
        .collect();
    out.unexpected_datapoints.sort();
    if !tug_err.is_empty() {
        out.tug_mae = Some(tug_err.iter().sum::<f64>() / tug_err.len() as f64);
    }
    out
}
