mod common;

use base64::Engine;
use common::*;
use hg_core::model::*;
use hg_core::payload::{UploadEnvelope, UploadPayload};
use hg_core::*;
use hg_ctm::*;
use hg_store::OccurrenceFilter;
use proptest::prelude::*;
use serde_json::json;

/// Everything one study owns.
struct Tenant {
    s: StudyFixture,
    subject: SubjectId,
    device: String,
    cohort: Cohort,
    testset: TestSet,
    rule: Rule,
    occurrence: OccurrenceId,
    digest: String,
}

fn tenant(w: &World, name: &str) -> Tenant {
    let mut s = w.study(name);
    let subs = s.subjects(w, &[70.0]);
    let cohort = s.cohort(w, "c", &subs);
    let testset = s.testset(w, "t", &[TestKind::Tug]);
    let made = w
        .svc
        .create_task(&s.researcher, &s.id, &NewTask { testset_id: testset.testset_id.clone(), cohort_id: cohort.cohort_id.clone(), schedule: window(ScheduleMode::Once) })
        .unwrap();
    let rule = w
        .svc
        .create_rule(
            &s.researcher,
            &s.id,
            &NewRule {
                name: "r".into(),
                trigger: Trigger::OnResult { worker_kind: "tug".into() },
                predicate: Predicate { metric: "daily_mean".into(), comparator: Comparator::Gt, value: 13.5 },
                action: serde_json::from_value(json!({
                    "target_testset_id": testset.testset_id, "sub_cohort_name": "slow", "source_cohort_id": cohort.cohort_id,
                }))
                .unwrap(),
                active: true,
            },
        )
        .unwrap();
    let (_, dev, device) = &s.devices[0];
    let doc = json!({
        "schema": "accel/v1", "subject_id": subs[0], "device_id": device, "sample_rate_hz": 50.0,
        "start_time": "2026-03-02T10:00:00Z", "units": "m/s2", "samples": [[0.0, 0.0, 9.81]],
    });
    let env = UploadEnvelope {
        occurrence_id: made.occurrences[0].occurrence_id.clone(),
        test_id: testset.tests[0].test_id.clone(),
        idempotency_key: "k".into(),
        collected_at: at(0, 10, 0),
        clock_offset_ms: 0,
        payload: UploadPayload::File {
            media_type: "application/json".into(),
            data_b64: base64::engine::general_purpose::STANDARD.encode(doc.to_string()),
        },
    };
    let up = w.svc.upload(dev, &env).unwrap();
    let Payload::File { object } = up.datapoint.payload else { unreachable!() };
    Tenant {
        subject: subs[0].clone(),
        device: device.clone(),
        occurrence: made.occurrences[0].occurrence_id.clone(),
        digest: object.sha256,
        s,
        cohort,
        testset,
        rule,
    }
}

const OPS: usize = 26;

/// Runs operation `op` as `p` (a credential of tenant `a`) against
/// entities of tenant `b`.
fn attempt(w: &World, p: &Principal, a: &Tenant, b: &Tenant, op: usize) -> Result<()> {
    let svc = &w.svc;
    let sched = window(ScheduleMode::Once);
    let action = |ts: &TestSetId, c: &CohortId| -> RuleAction {
        serde_json::from_value(json!({"target_testset_id": ts, "sub_cohort_name": "x", "source_cohort_id": c})).unwrap()
    };
    let rule = |ts: &TestSetId, c: &CohortId| NewRule {
        name: "x".into(),
        trigger: Trigger::OnResult { worker_kind: "tug".into() },
        predicate: Predicate { metric: "daily_mean".into(), comparator: Comparator::Gt, value: 1.0 },
        action: action(ts, c),
        active: true,
    };
    match op {
        0 => svc.get_study(p, &b.s.id).map(drop),
        1 => svc.list_subjects(p, &b.s.id).map(drop),
        2 => svc.add_subject(p, &b.s.id, &NewSubject::default()).map(drop),
        3 => svc
            .define_cohort(p, &a.s.id, &NewCohort { name: "x".into(), selector: CohortSelector::Explicit(vec![b.subject.clone()]) })
            .map(drop),
        4 => svc
            .define_cohort(p, &b.s.id, &NewCohort { name: "x".into(), selector: CohortSelector::Explicit(vec![]) })
            .map(drop),
        5 => svc.create_testset(p, &b.s.id, &NewTestSet { name: "x".into(), tests: vec![NewTest { kind: TestKind::Phq8, params: json!({}) }] }).map(drop),
        6 => svc
            .create_task(p, &a.s.id, &NewTask { testset_id: b.testset.testset_id.clone(), cohort_id: a.cohort.cohort_id.clone(), schedule: sched })
            .map(drop),
        7 => svc
            .create_task(p, &a.s.id, &NewTask { testset_id: a.testset.testset_id.clone(), cohort_id: b.cohort.cohort_id.clone(), schedule: sched })
            .map(drop),
        8 => svc.create_rule(p, &a.s.id, &rule(&b.testset.testset_id, &a.cohort.cohort_id)).map(drop),
        9 => svc.create_rule(p, &a.s.id, &rule(&a.testset.testset_id, &b.cohort.cohort_id)).map(drop),
        10 => svc.evaluate_rule_now(p, &a.s.id, &b.rule.rule_id, None).map(drop),
        11 => svc.evaluate_rule_now(p, &b.s.id, &b.rule.rule_id, None).map(drop),
        12 => svc.rule_runs(p, &a.s.id, &b.rule.rule_id).map(drop),
        13 => svc.poll_tasks(p, &b.device, Some(at(0, 10, 0))).map(drop),
        14 => svc
            .upload(
                p,
                &UploadEnvelope {
                    occurrence_id: b.occurrence.clone(),
                    test_id: b.testset.tests[0].test_id.clone(),
                    idempotency_key: "evil".into(),
                    collected_at: at(0, 10, 0),
                    clock_offset_ms: 0,
                    payload: UploadPayload::Text { text: "{}".into() },
                },
            )
            .map(drop),
        15 => svc.list_results(p, &b.s.id, &ResultQuery::default()).map(drop),
        16 => svc.list_results(p, &a.s.id, &ResultQuery { subject: Some(b.subject.clone()), ..Default::default() }).map(drop),
        17 => svc
            .list_results(p, &a.s.id, &ResultQuery { test: Some(b.testset.tests[0].test_id.to_string()), ..Default::default() })
            .map(drop),
        18 => svc.export(p, &b.s.id).map(drop),
        19 => svc.summary(p, &b.s.id).map(drop),
        20 => svc.device_token(p, &a.s.id, &b.device).map(drop),
        21 => svc.object(p, &b.digest).map(drop),
        22 => svc.list_occurrences(p, &b.s.id, &OccurrenceFilter::default()).map(drop),
        23 => svc.list_cohorts(p, &b.s.id).map(drop),
        24 => svc.list_rules(p, &b.s.id).map(drop),
        _ => svc.claim(p, &ClaimRequest { worker_kind: "tug".into(), lease_secs: None }).map(drop),
    }
}

fn setup() -> (World, Vec<Tenant>) {
    let w = World::new();
    w.clock.set(at(0, 9, 30));
    let tenants = (0..3).map(|i| tenant(&w, &format!("study-{i}"))).collect();
    (w, tenants)
}

#[test]
fn every_cross_study_operation_is_forbidden() {
    let (w, t) = setup();
    let mut checked = 0;
    for a in 0..t.len() {
        for b in 0..t.len() {
            if a == b {
                continue;
            }
            let creds = [t[a].s.researcher.clone(), t[a].s.devices[0].1.clone()];
            for p in &creds {
                for op in 0..OPS {
                    let e = attempt(&w, p, &t[a], &t[b], op).expect_err(&format!("op {op} succeeded"));
                    assert_eq!(e.code, ErrorCode::Forbidden, "op {op} as {p:?}: {e}");
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 6 * 2 * OPS);
}

#[test]
fn same_study_controls_succeed() {
    let (w, t) = setup();
    let a = &t[0];
    for op in [0, 1, 4, 5, 12, 15, 18, 19, 22, 23, 24] {
        attempt(&w, &a.s.researcher, a, a, op).unwrap_or_else(|e| panic!("op {op}: {e}"));
    }
    w.svc.object(&a.s.researcher, &a.digest).unwrap();
    w.svc.poll_tasks(&a.s.devices[0].1, &a.device, Some(at(0, 10, 0))).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_cross_study_pairs_forbidden(a in 0usize..3, shift in 1usize..3, device in any::<bool>(), op in 0usize..OPS) {
        thread_local! {
            static SETUP: (World, Vec<Tenant>) = setup();
        }
        SETUP.with(|(w, t)| {
            let b = (a + shift) % 3;
            let p = if device { t[a].s.devices[0].1.clone() } else { t[a].s.researcher.clone() };
            let r = attempt(w, &p, &t[a], &t[b], op);
            prop_assert!(matches!(&r, Err(e) if e.code == ErrorCode::Forbidden), "op {} gave {:?}", op, r);
            Ok(())
        })?;
    }
}
