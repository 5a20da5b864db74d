#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use base64::Engine;
use chrono::NaiveDate;
use hg_core::model::*;
use hg_core::payload::{ACCEL_SCHEMA, AccelDocument, MID_HIP, MID_SHOULDER, POSE_SCHEMA, PoseDocument, PoseFrame, UploadEnvelope, UploadPayload};
use hg_core::*;
use hg_ctm::*;
use hg_store::Store;
use serde_json::json;

pub fn day0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2026, 3, 2).unwrap()
}

pub fn at(day: u64, h: u32, m: u32) -> Timestamp {
    Timestamp::at(day0() + chrono::Days::new(day), TimeOfDay::hms(h, m, 0).unwrap())
}

pub struct Fx {
    pub svc: Arc<Service>,
    pub clock: ManualClock,
    pub study: StudyId,
    pub researcher: Principal,
    pub cohort: CohortId,
    pub devices: Vec<(SubjectId, Principal, String)>,
}

impl Fx {
    pub fn new(subjects: usize) -> Self {
        let clock = ManualClock::new(at(0, 8, 0));
        let store = Store::open_in_memory(Arc::new(clock.clone()));
        Self::on(Arc::new(Service::new(Arc::new(store))), clock, "worker-study", subjects)
    }

    pub fn on(svc: Arc<Service>, clock: ManualClock, name: &str, subjects: usize) -> Self {
        let made = svc.create_study(&CreateStudy { name: name.into() }).unwrap();
        let researcher = svc.authenticate(Some(&made.token)).unwrap();
        let study = made.study.study_id;
        let mut devices = Vec::new();
        for i in 0..subjects {
            let device = format!("{name}-dev-{i}");
            let s = svc
                .add_subject(
                    &researcher,
                    &study,
                    &NewSubject {
                        raw_id: Some(format!("raw-{i}")),
                        attributes: BTreeMap::from([("age".to_string(), AttrValue::Number(60.0 + i as f64))]),
                        device_id: Some(device.clone()),
                    },
                )
                .unwrap();
            let p = svc.authenticate(s.device_token.as_deref()).unwrap();
            devices.push((s.subject.subject_id, p, device));
        }
        let members = devices.iter().map(|d| d.0.clone()).collect();
        let cohort = svc
            .define_cohort(&researcher, &study, &NewCohort { name: "all".into(), selector: CohortSelector::Explicit(members) })
            .unwrap()
            .cohort_id;
        Self { svc, clock, study, researcher, cohort, devices }
    }

    /// A single-test test-set assigned to everyone.
    pub fn task(&self, name: &str, kind: TestKind, mode: ScheduleMode) -> TaskCreated {
        let ts = self
            .svc
            .create_testset(
                &self.researcher,
                &self.study,
                &NewTestSet { name: name.into(), tests: vec![NewTest { kind, params: json!({}) }] },
            )
            .unwrap();
        self.svc
            .create_task(
                &self.researcher,
                &self.study,
                &NewTask {
                    testset_id: ts.testset_id,
                    cohort_id: self.cohort.clone(),
                    schedule: Schedule {
                        mode,
                        window_start: TimeOfDay::hms(9, 0, 0).unwrap(),
                        window_end: TimeOfDay::hms(21, 0, 0).unwrap(),
                        start_date: None,
                        end_date: None,
                    },
                },
            )
            .unwrap()
    }

    pub fn poll(&self, i: usize) -> Vec<OccurrenceDescriptor> {
        let (_, p, dev) = &self.devices[i];
        self.svc.poll_tasks(p, dev, None).unwrap()
    }

    pub fn upload(&self, i: usize, occ: &OccurrenceDescriptor, key: &str, payload: UploadPayload) -> hg_store::Ingested {
        let env = UploadEnvelope {
            occurrence_id: occ.occurrence_id.clone(),
            test_id: occ.tests[0].test_id.clone(),
            idempotency_key: key.into(),
            collected_at: self.svc.now(),
            clock_offset_ms: 0,
            payload,
        };
        self.svc.upload(&self.devices[i].1, &env).unwrap()
    }

    pub fn publish(&self) -> usize {
        self.svc.tick(true).unwrap().published.len()
    }

    pub fn results(&self) -> Vec<AnalyticResult> {
        self.svc.list_results(&self.researcher, &self.study, &ResultQuery::default()).unwrap()
    }
}

pub fn phq8_payload(occ: &OccurrenceDescriptor, answers: [u8; 8]) -> UploadPayload {
    let doc = json!({
        "schema": "phq8/v1",
        "subject_id": occ.subject_id,
        "occurrence_id": occ.occurrence_id,
        "completed_at": "2026-03-02T10:00:00Z",
        "responses": (1..=8).map(|q| json!({"question": q, "answer": answers[q - 1]})).collect::<Vec<_>>(),
    });
    UploadPayload::Text { text: doc.to_string() }
}

fn file(media_type: &str, bytes: Vec<u8>) -> UploadPayload {
    UploadPayload::File {
        media_type: media_type.into(),
        data_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
    }
}

/// Gravity plus one Gaussian pulse per step at a fixed cadence.
pub fn walk(subject: &SubjectId, cadence_hz: f64, walk_s: f64) -> AccelDocument {
    let rate = 50.0;
    let n = ((walk_s + 4.0) * rate) as usize;
    let steps: Vec<f64> = (0..(walk_s * cadence_hz) as usize).map(|k| 2.0 + k as f64 / cadence_hz).collect();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let z = 9.81 + steps.iter().map(|s| 3.0 * (-0.5 * ((t - s) / 0.05).powi(2)).exp()).sum::<f64>();
            [0.0, 0.0, z]
        })
        .collect();
    AccelDocument {
        schema: ACCEL_SCHEMA.into(),
        subject_id: subject.clone(),
        device_id: "watch".into(),
        sample_rate_hz: rate,
        start_time: at(0, 10, 0),
        units: "m/s2".into(),
        samples,
    }
}

pub fn accel_payload(doc: &AccelDocument) -> UploadPayload {
    file("application/json", serde_json::to_vec(doc).unwrap())
}

/// `cycles` smoothstep sit-stand-sit cycles at 30 fps.
pub fn sts_pose(cycles: usize) -> PoseDocument {
    let fps = 30.0;
    let period = 4.0;
    let n = ((cycles as f64 * period + 2.0) * fps) as usize;
    let ss = |u: f64| {
        let u = u.clamp(0.0, 1.0);
        u * u * (3.0 - 2.0 * u)
    };
    let frames = (0..n)
        .map(|i| {
            let t = i as f64 / fps;
            let u = t - 1.0;
            let h = if u < 0.0 || u >= cycles as f64 * period {
                0.0
            } else {
                let p = u % period;
                if p < 1.0 { ss(p) } else if p < 2.0 { 1.0 } else if p < 3.0 { 1.0 - ss(p - 2.0) } else { 0.0 }
            };
            PoseFrame {
                t,
                keypoints: BTreeMap::from([
                    (MID_SHOULDER.to_string(), [320.0, 300.0 - 150.0 * h, 0.9]),
                    (MID_HIP.to_string(), [320.0, 400.0 - 150.0 * h, 0.9]),
                ]),
            }
        })
        .collect();
    PoseDocument { schema: POSE_SCHEMA.into(), fps, frames }
}

pub fn pose_payload(doc: &PoseDocument) -> UploadPayload {
    file("application/json", serde_json::to_vec(doc).unwrap())
}
