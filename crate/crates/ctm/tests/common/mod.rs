#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::NaiveDate;
use hg_core::model::*;
use hg_core::payload::{UploadEnvelope, UploadPayload};
use hg_core::*;
use hg_ctm::*;
use hg_store::Store;
use serde_json::json;

pub fn day0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2026, 3, 2).unwrap()
}

pub fn at(day: u32, h: u32, m: u32) -> Timestamp {
    Timestamp::at(day0() + chrono::Days::new(day as u64), TimeOfDay::hms(h, m, 0).unwrap())
}

pub fn window(mode: ScheduleMode) -> Schedule {
    Schedule {
        mode,
        window_start: TimeOfDay::hms(9, 0, 0).unwrap(),
        window_end: TimeOfDay::hms(21, 0, 0).unwrap(),
        start_date: None,
        end_date: None,
    }
}

pub struct World {
    pub svc: Service,
    pub clock: ManualClock,
    pub worker: Principal,
}

impl World {
    pub fn new() -> Self {
        let clock = ManualClock::new(at(0, 8, 0));
        let store = Store::open_in_memory(Arc::new(clock.clone()));
        let svc = Service::new(Arc::new(store));
        svc.install_worker_token("hgt_worker").unwrap();
        let worker = svc.authenticate(Some("hgt_worker")).unwrap();
        Self { svc, clock, worker }
    }

    pub fn study(&self, name: &str) -> StudyFixture {
        let created = self.svc.create_study(&CreateStudy { name: name.into() }).unwrap();
        let researcher = self.svc.authenticate(Some(&created.token)).unwrap();
        StudyFixture { id: created.study.study_id, token: created.token, researcher, devices: Vec::new() }
    }
}

pub struct StudyFixture {
    pub id: StudyId,
    pub token: String,
    pub researcher: Principal,
    pub devices: Vec<(Subject, Principal, String)>,
}

impl StudyFixture {
    /// Adds subjects with the given ages and a device each.
    pub fn subjects(&mut self, w: &World, ages: &[f64]) -> Vec<SubjectId> {
        let mut out = Vec::new();
        for age in ages {
            let n = self.devices.len();
            let device = format!("{}-dev-{n}", self.id);
            let made = w
                .svc
                .add_subject(
                    &self.researcher,
                    &self.id,
                    &NewSubject {
                        raw_id: Some(format!("patient-{n}")),
                        attributes: BTreeMap::from([("age".to_string(), AttrValue::Number(*age))]),
                        device_id: Some(device.clone()),
                    },
                )
                .unwrap();
            let p = w.svc.authenticate(made.device_token.as_deref()).unwrap();
            out.push(made.subject.subject_id.clone());
            self.devices.push((made.subject, p, device));
        }
        out
    }

    pub fn cohort(&self, w: &World, name: &str, members: &[SubjectId]) -> Cohort {
        w.svc
            .define_cohort(
                &self.researcher,
                &self.id,
                &NewCohort { name: name.into(), selector: CohortSelector::Explicit(members.to_vec()) },
            )
            .unwrap()
    }

    pub fn testset(&self, w: &World, name: &str, kinds: &[TestKind]) -> TestSet {
        w.svc
            .create_testset(
                &self.researcher,
                &self.id,
                &NewTestSet {
                    name: name.into(),
                    tests: kinds.iter().map(|k| NewTest { kind: *k, params: json!({}) }).collect(),
                },
            )
            .unwrap()
    }
}

pub fn phq8_envelope(occ: &OccurrenceDescriptor, answers: [u8; 8], key: &str) -> UploadEnvelope {
    let doc = json!({
        "schema": "phq8/v1",
        "subject_id": occ.subject_id,
        "occurrence_id": occ.occurrence_id,
        "completed_at": "2026-03-02T10:00:00Z",
        "responses": (1..=8).map(|q| json!({"question": q, "answer": answers[q - 1]})).collect::<Vec<_>>(),
    });
    UploadEnvelope {
        occurrence_id: occ.occurrence_id.clone(),
        test_id: occ.tests[0].test_id.clone(),
        idempotency_key: key.into(),
        collected_at: at(0, 10, 0),
        clock_offset_ms: 0,
        payload: UploadPayload::Text { text: doc.to_string() },
    }
}

/// Answers summing to `total`.
pub fn answers_for(total: u8) -> [u8; 8] {
    let mut a = [0u8; 8];
    let mut left = total;
    for x in a.iter_mut() {
        *x = left.min(3);
        left -= *x;
    }
    a
}

/// Claims every job of `kind` and scores PHQ-8 payloads by summing answers.
pub fn drain_phq8(w: &World) -> usize {
    let mut n = 0;
    while let Some(c) = w
        .svc
        .claim(&w.worker, &ClaimRequest { worker_kind: "phq8".into(), lease_secs: Some(30.0) })
        .unwrap()
    {
        for dp in &c.datapoints {
            let Payload::Text { text } = &dp.payload else { panic!("text payload") };
            let doc = hg_core::payload::Phq8Document::parse(text.as_bytes()).unwrap();
            let total: u32 = doc.answers().iter().map(|&a| a as u32).sum();
            w.svc
                .submit_result(
                    &w.worker,
                    &SubmitResult {
                        datapoint_id: dp.datapoint_id.clone(),
                        dataset_id: Some(c.dataset.dataset_id.clone()),
                        worker_kind: "phq8".into(),
                        schema_version: 1,
                        body: json!({"total_score": total}),
                    },
                )
                .unwrap();
            n += 1;
        }
        w.svc
            .ack(&w.worker, &c.job.job_id, &AckRequest { outcome: hg_store::Outcome::Success, lease_attempts: c.job.attempts })
            .unwrap();
    }
    n
}
