//! Acceptance checks. Each criterion runs in isolation and prints one
//! PASS or FAIL line; the process fails if any criterion does.
//!
//! An optional positional argument filters criteria by substring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::AssertUnwindSafe;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine;
use chrono::NaiveDate;
use hg_analytics::phq8::{Phq8Response, score_document, score_phq8};
use hg_analytics::sts::{StsConfig, TransitionKind, analyze_pose};
use hg_analytics::tug::{
    Forest, ForestParams, SeriesStats, StepSeries, TugConfig, TugModel, detect_steps, extract_features,
};
use hg_core::model::*;
use hg_core::payload::{PoseDocument, UploadEnvelope, UploadPayload};
use hg_core::{Clock, CohortId, ErrorCode, HgError, JobId, ManualClock, RuleId, StudyId, SubjectId, TestSetId, TimeOfDay, Timestamp};
use hg_ctm::*;
use hg_sim::*;
use hg_store::{Job, JobState, Outcome, Store};
use hg_worker::{Backend, HttpBackend, RunOptions, WorkerDescriptor, run_worker, standard_analytic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;
use tokio::sync::{Notify, watch};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn hg_err(e: HgError) -> String {
    format!("{}: {}", e.code.as_str(), e.message)
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Check); 9] = [
        ("phq8-exhaustive", phq8_exhaustive),
        ("step-detection", step_detection),
        ("feature-reference", feature_reference),
        ("tug-forest", tug_forest),
        ("sit-to-stand", sit_to_stand),
        ("end-to-end-fleet", end_to_end_fleet),
        ("queue-properties", queue_properties),
        ("multi-tenancy", multi_tenancy),
        ("crash-recovery", crash_recovery),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name:<20} {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name:<20} {why} [{secs:.2}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap()
}

fn band(total: u32) -> &'static str {
    match total {
        0..=4 => "none",
        5..=9 => "mild",
        10..=14 => "moderate",
        15..=19 => "moderately_severe",
        _ => "severe",
    }
}

fn phq8_exhaustive() -> Check {
    let started = Instant::now();
    let mut mismatches = 0;
    let mut per_band: BTreeMap<&str, usize> = BTreeMap::new();
    for code in 0u32..1 << 16 {
        let mut answers = [0u8; 8];
        let mut brute = 0u32;
        for (i, a) in answers.iter_mut().enumerate() {
            *a = ((code >> (2 * i)) & 3) as u8;
            brute += *a as u32;
        }
        let r = score_phq8(&Phq8Response::new(answers).map_err(|e| e.to_string())?);
        if r.total_score as u32 != brute || r.category.as_str() != band(brute) || r.per_item != answers {
            mismatches += 1;
        }
        *per_band.entry(band(brute)).or_default() += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(mismatches == 0, "{mismatches} mismatches");
    ensure!(secs < 5.0, "took {secs:.2}s");
    ensure!(per_band.values().sum::<usize>() == 65_536, "vector count");
    Ok(format!("65536 vectors, 0 mismatches, mild band {} vectors, {secs:.2}s", per_band["mild"]))
}

fn step_detection() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x57e95);
    let cfg = TugConfig::default();
    let (mut worst_count, mut worst_mean) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let noise = 0.2 * i as f64 / 99.0;
        let dur = rng.random_range(30.0..=120.0);
        let gait = GaitProfile {
            cadence_hz: rng.random_range(1.4..=2.2),
            step_variability: rng.random_range(0.0..0.03),
            preferred_walk_secs: dur,
        };
        let opts = AccelOptions { amplitude: rng.random_range(2.0..4.0), noise, ..AccelOptions::default() };
        let walk = synth_accel(&gait, dur, &opts, &mut rng).map_err(hg_err)?;
        let eps = detect_steps(&walk.trace, &cfg).map_err(|e| format!("case {i}: {e}"))?;
        let truth = &walk.step_times;
        let detected: usize = eps.iter().map(|e| e.steps()).sum();
        let count_err = (detected as f64 - truth.len() as f64).abs() / truth.len() as f64;
        let durations: Vec<f64> =
            eps.iter().flat_map(|e| e.step_series(opts.rate_hz).step_durations).collect();
        ensure!(!durations.is_empty(), "case {i}: no step durations");
        let got_mean = durations.iter().sum::<f64>() / durations.len() as f64;
        let true_mean = (truth[truth.len() - 1] - truth[0]) / (truth.len() - 1) as f64;
        let mean_err = (got_mean - true_mean).abs();
        ensure!(
            count_err <= 0.02,
            "case {i} ({gait:?}, noise {noise:.3}): {detected} steps vs {}",
            truth.len()
        );
        ensure!(mean_err <= 0.005, "case {i} ({gait:?}, noise {noise:.3}): mean step error {mean_err:.5}s");
        worst_count = worst_count.max(count_err);
        worst_mean = worst_mean.max(mean_err);
    }
    Ok(format!(
        "100 gaits, worst count error {:.2}%, worst mean duration error {:.2} ms",
        100.0 * worst_count,
        1000.0 * worst_mean
    ))
}

/// Correctly rounded sum (Shewchuk partials).
fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    partials.iter().sum()
}

/// Linear interpolation between closest ranks, as numpy's default method.
fn reference_percentile(sorted: &[f64], pct: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

fn reference_stats(x: &[f64]) -> [f64; 10] {
    let n = x.len() as f64;
    let mean = fsum(x.iter().copied()) / n;
    let var = fsum(x.iter().map(|v| (v - mean).powi(2))) / n;
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p = |q| reference_percentile(&s, q);
    [mean, var.sqrt(), s[0], s[s.len() - 1], p(50.0), p(5.0), p(25.0), p(75.0), p(95.0), p(75.0) - p(25.0)]
}

fn random_series(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(2..=300);
    match rng.random_range(0..4) {
        0 => (0..n).map(|_| rng.random_range(0.3..1.2)).collect(),
        1 => {
            let d = Normal::new(rng.random_range(0.45..0.7), rng.random_range(0.001..0.08)).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        // Whole-sample durations at 50 Hz, with many ties.
        2 => (0..n).map(|_| rng.random_range(20..35) as f64 / 50.0).collect(),
        _ => {
            let base = rng.random_range(0.4..0.8);
            (0..n).map(|i| base + 0.002 * i as f64 + rng.random_range(-0.01..0.01)).collect()
        }
    }
}

fn feature_reference() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfea7);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for case in 0..1000 {
        let durations = random_series(&mut rng);
        let diffs: Vec<f64> = durations.windows(2).map(|w| w[1] - w[0]).collect();
        let f = extract_features(&StepSeries::new(durations.clone())).map_err(|e| e.to_string())?;
        ensure!(
            f.step_durations.is_ordered() && f.diffs.is_ordered(),
            "case {case}: percentile ordering violated"
        );
        for (stats, input, label) in [(&f.step_durations, &durations, "sd"), (&f.diffs, &diffs, "diff")] {
            let want = reference_stats(input);
            for ((got, want), name) in stats.to_array().iter().zip(want).zip(SeriesStats::NAMES) {
                let rel = if got == &want { 0.0 } else { (got - want).abs() / want.abs() };
                ensure!(rel <= 1e-9, "case {case} {name}_{label}: {got} vs reference {want}");
                worst = worst.max(rel);
                compared += 1;
            }
        }
    }
    Ok(format!("1000 series, {compared} statistics, worst relative error {worst:.1e}"))
}

fn tug_forest() -> Check {
    let corpus = tug_corpus(500, 2024);
    ensure!(corpus.len() == 500, "corpus has {} episodes", corpus.len());
    ensure!(tug_corpus(500, 2024) == corpus, "corpus is not deterministic");
    let (train, holdout) = corpus.split_at(400);
    let x: Vec<_> = train.iter().map(|(f, _)| *f).collect();
    let y: Vec<_> = train.iter().map(|(_, t)| *t).collect();
    let fit = || Forest::fit(&x, &y, ForestParams::default(), 7).map(|f| TugModel::forest("acceptance", f, 7));
    let model = fit().map_err(|e| e.to_string())?;
    let again = fit().map_err(|e| e.to_string())?;
    ensure!(model.to_json() == again.to_json(), "refit with the same seed differs");
    let mae = holdout.iter().map(|(f, t)| (model.raw_predict_array(f) - t).abs()).sum::<f64>() / holdout.len() as f64;
    ensure!(mae <= 1.7, "held-out MAE {mae:.3}s");
    Ok(format!("400 train / 100 held out, MAE {mae:.3}s, refit identical"))
}

fn transform(doc: &PoseDocument, f: impl Fn(f64, f64) -> (f64, f64)) -> PoseDocument {
    let mut out = doc.clone();
    for frame in &mut out.frames {
        for kp in frame.keypoints.values_mut() {
            let (x, y) = f(kp[0], kp[1]);
            *kp = [x, y, kp[2]];
        }
    }
    out
}

fn sts_counts(doc: &PoseDocument) -> Result<(Vec<(TransitionKind, usize)>, usize, usize), String> {
    let r = analyze_pose(doc, &StsConfig::default(), None).map_err(|e| e.to_string())?;
    Ok((r.transitions.iter().map(|t| (t.kind, t.hesitation_count)).collect(), r.total_cycles, r.total_hesitations))
}

fn sit_to_stand() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5757);
    let mut sequences = 0;
    for case in 0..40 {
        let k = case % 4;
        let mut profile = SubjectProfile::sample(case as u64, 0, 1.0);
        profile.sts.cycle_period_s = rng.random_range(5.0..8.0);
        let plateaus: Vec<Plateau> =
            (0..k).map(|_| Plateau { cycle: rng.random_range(0..5), secs: rng.random_range(0.3..0.8) }).collect();
        let opts = PoseOptions { noise_px: rng.random_range(0.0..0.6), ..PoseOptions::default() };
        let synth = synth_pose(&profile, 5, &plateaus, &opts, &mut rng).map_err(hg_err)?;
        let (transitions, cycles, hesitations) = sts_counts(&synth.doc)?;
        let ups: Vec<usize> =
            transitions.iter().filter(|t| t.0 == TransitionKind::SitToStand).map(|t| t.1).collect();
        ensure!(ups.len() == 5 && cycles == 5, "case {case}: {} rises, {cycles} cycles", ups.len());
        let mut want = [0usize; 5];
        for p in &plateaus {
            want[p.cycle] += 1;
        }
        ensure!(ups == want, "case {case}: hesitations per rise {ups:?}, injected {want:?}");
        ensure!(hesitations == k, "case {case}: {hesitations} hesitations, injected {k}");
        let base = (transitions, cycles, hesitations);
        for (label, moved) in [
            ("scaled", transform(&synth.doc, |x, y| (x * 1.75, y * 1.75))),
            ("shrunk", transform(&synth.doc, |x, y| (x * 0.4, y * 0.4))),
            ("translated", transform(&synth.doc, |x, y| (x - 90.0, y + 215.0))),
            ("both", transform(&synth.doc, |x, y| (2.5 * x + 12.0, 2.5 * y - 330.0))),
        ] {
            ensure!(sts_counts(&moved)? == base, "case {case}: {label} pose changed the counts");
        }
        sequences += 1;
    }
    Ok(format!("{sequences} five-cycle sequences, k=0..3 plateaus recovered, invariant under 4 transforms"))
}

const OPS: &str = "hgt_acceptance_ops";

fn day0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2026, 3, 2).unwrap()
}

async fn live_server(dir: &std::path::Path, start: TimeOfDay) -> hg_ctm::Server {
    hg_ctm::start(ServeConfig {
        port: 0,
        data_dir: dir.to_path_buf(),
        tick_secs: 0.0,
        virtual_start: Some(Timestamp::at(day0(), start)),
        worker_token: Some(OPS.into()),
        ..Default::default()
    })
    .await
    .unwrap()
}

fn end_to_end_fleet() -> Check {
    runtime().block_on(async {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let srv = live_server(dir.path(), TimeOfDay::hms(0, 0, 0).unwrap()).await;
        let (stop, rx) = watch::channel(false);
        let mut workers = tokio::task::JoinSet::new();
        for kind in [TestKind::Phq8, TestKind::Tug] {
            let backend = Arc::new(HttpBackend::new(&srv.url(), OPS).map_err(hg_err)?);
            let d = WorkerDescriptor::standard(kind.worker_kind(), 4).map_err(hg_err)?;
            let analytic: Arc<dyn hg_worker::Analytic> = Arc::from(standard_analytic(kind));
            let opts = RunOptions { idle_poll: Duration::from_millis(10), ..Default::default() };
            let rx = rx.clone();
            workers.spawn(async move { run_worker(backend, &d, analytic, opts, rx).await.map(drop) });
        }
        let c = Client::new(&srv.url()).map_err(hg_err)?;
        let scenario = Scenario {
            study_name: "acceptance-fleet".into(),
            subjects: 20,
            compliance: 0.85,
            seed: 20,
            with_rule: true,
            ..Default::default()
        };
        let plan = setup_study(&c, &scenario).await.map_err(hg_err)?;
        let opts = FleetOptions { days: 3, start: day0(), ..Default::default() };
        let out = run_fleet(&c, OPS, &plan, &opts).await.map_err(hg_err)?;
        let r = &out.report;

        let researcher = c.with_token(&plan.researcher_token);
        let export = researcher.export(&plan.study_id).await.map_err(hg_err)?;
        let jobs = c.with_token(OPS).list_jobs(None, None).await.map_err(hg_err)?;
        let cohorts = researcher.list_cohorts(&plan.study_id).await.map_err(hg_err)?;
        stop.send(true).unwrap();
        while let Some(w) = workers.join_next().await {
            w.unwrap().map_err(hg_err)?;
        }
        srv.shutdown().await.map_err(hg_err)?;
        let secs = started.elapsed().as_secs_f64();

        ensure!(r.completed > 0 && r.skipped > 0, "compliance produced {} completed, {} skipped", r.completed, r.skipped);
        ensure!(
            r.server.datapoints == r.completed && export.datapoints.len() as u64 == r.completed,
            "server holds {} datapoints, simulator completed {}",
            r.server.datapoints,
            r.completed
        );
        ensure!(r.reconciliation.is_clean(), "reconciliation {:?}", r.reconciliation);

        // Brute force over stored scores: low mood on day D puts the
        // subject in that day's sub-cohort.
        let raw: HashMap<&SubjectId, &str> = export.vault.iter().map(|v| (&v.pseudonym, v.raw_id.as_str())).collect();
        let uploaded: HashMap<_, _> = export.datapoints.iter().map(|d| (&d.datapoint_id, d.uploaded_at.date())).collect();
        let mut expected: BTreeMap<NaiveDate, BTreeSet<String>> = BTreeMap::new();
        for res in export.results.iter().filter(|res| res.worker_kind == "phq8") {
            let day = res.datapoint_id.as_ref().and_then(|d| uploaded.get(d)).ok_or("phq8 result without datapoint")?;
            let entry = expected.entry(*day).or_default();
            if res.metric("total_score").ok_or("phq8 result without total_score")? < scenario.threshold {
                entry.insert(raw[&res.subject_id].to_string());
            }
        }
        ensure!(expected.len() == 3, "phq8 results span {} days", expected.len());
        let mut members_checked = 0;
        for (day, want) in &expected {
            let name = format!("{LOW_MOOD} {day}");
            let got: BTreeSet<String> = cohorts
                .iter()
                .find(|c| c.name == name)
                .map(|c| c.member_ids.iter().map(|m| raw[m].to_string()).collect())
                .unwrap_or_default();
            ensure!(&got == want, "{name}: server {got:?}, brute force {want:?}");
            members_checked += got.len();
        }
        ensure!(members_checked > 0, "no subject scored below the threshold");

        let with_result: BTreeSet<_> = export.results.iter().filter_map(|res| res.dataset_id.clone()).collect();
        ensure!(!jobs.is_empty(), "no datasets were published");
        for job in &jobs {
            ensure!(job.state == JobState::Done, "job {} is {:?}", job.job_id, job.state);
            ensure!(with_result.contains(&job.dataset_id), "dataset {} has no stored result", job.dataset_id);
        }
        ensure!(secs < 60.0, "wall time {secs:.1}s");
        Ok(format!(
            "{} datapoints = {} completed, {} sub-cohort memberships match, {} datasets all with results, {secs:.1}s",
            r.server.datapoints,
            r.completed,
            members_checked,
            jobs.len()
        ))
    })
}

/// What the queue should do, replayed alongside the real one.
struct Model {
    jobs: Vec<ModelJob>,
    index: HashMap<JobId, usize>,
    max_retries: u32,
}

#[derive(Clone, Copy, PartialEq, Debug)]
struct ModelJob {
    state: JobState,
    attempts: u32,
    expires: i64,
}

impl Model {
    fn reap(&mut self, now: i64) {
        for j in &mut self.jobs {
            if j.state == JobState::Leased && j.expires <= now {
                j.state = if j.attempts > self.max_retries { JobState::Dead } else { JobState::Ready };
            }
        }
    }

    fn next_ready(&self) -> Option<usize> {
        self.jobs.iter().position(|j| j.state == JobState::Ready)
    }

    fn live(&self, i: usize, attempts: u32, now: i64) -> bool {
        let j = &self.jobs[i];
        j.state == JobState::Leased && j.attempts == attempts && j.expires > now
    }
}

struct Lease {
    job: usize,
    attempt: u32,
    from: i64,
    until: i64,
}

struct Shared {
    model: Model,
    leases: Vec<Lease>,
    claims: usize,
    violations: Vec<String>,
    stale: usize,
}

const LEASE_SECS: f64 = 30.0;

fn queue_properties() -> Check {
    let clock = ManualClock::new(Timestamp::at(day0(), TimeOfDay::hms(8, 0, 0).unwrap()));
    let store = Store::open_in_memory(Arc::new(clock.clone()));
    let max_retries = store.queue_config().max_retries;
    let svc = Arc::new(Service::new(Arc::new(store)));
    svc.install_worker_token(OPS).map_err(hg_err)?;
    let worker = svc.authenticate(Some(OPS)).map_err(hg_err)?;

    let made = svc.create_study(&CreateStudy { name: "queue".into() }).map_err(hg_err)?;
    let researcher = svc.authenticate(Some(&made.token)).map_err(hg_err)?;
    let study = made.study.study_id;
    let subject = svc
        .add_subject(&researcher, &study, &NewSubject { device_id: Some("q-dev".into()), ..Default::default() })
        .map_err(hg_err)?;
    let device = svc.authenticate(subject.device_token.as_deref()).map_err(hg_err)?;
    let cohort = svc
        .define_cohort(
            &researcher,
            &study,
            &NewCohort { name: "all".into(), selector: CohortSelector::Explicit(vec![subject.subject.subject_id.clone()]) },
        )
        .map_err(hg_err)?;
    let schedule = Schedule {
        mode: ScheduleMode::Once,
        window_start: TimeOfDay::hms(9, 0, 0).unwrap(),
        window_end: TimeOfDay::hms(21, 0, 0).unwrap(),
        start_date: None,
        end_date: None,
    };
    for i in 0..1000 {
        let ts = svc
            .create_testset(
                &researcher,
                &study,
                &NewTestSet { name: format!("mood-{i}"), tests: vec![NewTest { kind: TestKind::Phq8, params: json!({}) }] },
            )
            .map_err(hg_err)?;
        svc.create_task(&researcher, &study, &NewTask { testset_id: ts.testset_id, cohort_id: cohort.cohort_id.clone(), schedule: schedule.clone() })
            .map_err(hg_err)?;
    }
    clock.set(Timestamp::at(day0(), TimeOfDay::hms(10, 0, 0).unwrap()));
    let occs = svc.poll_tasks(&device, "q-dev", None).map_err(hg_err)?;
    ensure!(occs.len() == 1000, "{} occurrences", occs.len());
    for (i, occ) in occs.iter().enumerate() {
        let answers: Vec<u32> = (0..8).map(|q| ((i + q) % 4) as u32).collect();
        let doc = json!({
            "schema": "phq8/v1",
            "subject_id": occ.subject_id,
            "occurrence_id": occ.occurrence_id,
            "completed_at": "2026-03-02T10:00:00Z",
            "responses": answers.iter().enumerate().map(|(q, a)| json!({"question": q + 1, "answer": a})).collect::<Vec<_>>(),
        });
        svc.upload(
            &device,
            &UploadEnvelope {
                occurrence_id: occ.occurrence_id.clone(),
                test_id: occ.tests[0].test_id.clone(),
                idempotency_key: format!("q{i}"),
                collected_at: svc.now(),
                clock_offset_ms: 0,
                payload: UploadPayload::Text { text: doc.to_string() },
            },
        )
        .map_err(hg_err)?;
    }
    let published = svc.tick(true).map_err(hg_err)?.published;
    ensure!(published.len() == 1000, "{} datasets published", published.len());
    let by_dataset: HashMap<_, _> =
        svc.list_jobs(&worker, None, None).map_err(hg_err)?.into_iter().map(|j| (j.dataset_id.clone(), j)).collect();
    let mut order: Vec<Job> = published.iter().map(|d| by_dataset[d].clone()).collect();
    order.sort_by_key(|j| j.enqueued_at);
    let model = Model {
        index: order.iter().enumerate().map(|(i, j)| (j.job_id.clone(), i)).collect(),
        jobs: vec![ModelJob { state: JobState::Ready, attempts: 0, expires: 0 }; order.len()],
        max_retries,
    };
    let shared = Arc::new(Mutex::new(Shared { model, leases: Vec::new(), claims: 0, violations: Vec::new(), stale: 0 }));
    let injected = Arc::new(Mutex::new(BTreeMap::<&str, usize>::new()));

    let threads: Vec<_> = (0..4u64)
        .map(|w| {
            let (svc, clock, worker, shared, injected) =
                (Arc::clone(&svc), clock.clone(), worker.clone(), Arc::clone(&shared), Arc::clone(&injected));
            std::thread::spawn(move || queue_worker(w, &svc, &clock, &worker, &shared, &injected))
        })
        .collect();
    for t in threads {
        t.join().map_err(|_| "worker thread panicked".to_string())??;
    }

    let shared = shared.lock().unwrap();
    ensure!(shared.violations.is_empty(), "{} violations, first: {}", shared.violations.len(), shared.violations[0]);
    let jobs = svc.list_jobs(&worker, None, None).map_err(hg_err)?;
    ensure!(jobs.len() == 1000, "{} jobs", jobs.len());
    for job in &jobs {
        ensure!(job.state.is_terminal(), "job {} ended {:?}", job.job_id, job.state);
        let i = shared.model.index[&job.job_id];
        let m = shared.model.jobs[i];
        ensure!((m.state, m.attempts) == (job.state, job.attempts), "job {i}: store {job:?}, model {m:?}");
    }
    // Two leases on one job never overlap in virtual time.
    let mut per_job: BTreeMap<usize, Vec<&Lease>> = BTreeMap::new();
    for l in &shared.leases {
        per_job.entry(l.job).or_default().push(l);
    }
    for (job, leases) in &mut per_job {
        leases.sort_by_key(|l| l.attempt);
        for w in leases.windows(2) {
            ensure!(
                w[1].from >= w[0].until,
                "job {job}: attempt {} from {} while attempt {} valid until {}",
                w[1].attempt,
                w[1].from,
                w[0].attempt,
                w[0].until
            );
        }
    }
    let results = svc.list_results(&researcher, &study, &ResultQuery::default()).map_err(hg_err)?;
    let mut rows: HashMap<_, usize> = HashMap::new();
    for r in &results {
        *rows.entry(r.dataset_id.clone().ok_or("result without dataset")?).or_default() += 1;
    }
    let done: Vec<&Job> = jobs.iter().filter(|j| j.state == JobState::Done).collect();
    for job in &done {
        let n = rows.get(&job.dataset_id).copied().unwrap_or(0);
        ensure!(n == 1, "dataset of job {} has {n} result rows", job.job_id);
    }
    ensure!(rows.values().all(|&n| n == 1), "a datapoint has duplicate result rows");
    let injected = injected.lock().unwrap();
    let failures: usize = injected.values().sum();
    let rate = failures as f64 / shared.claims as f64;
    ensure!((0.03..=0.07).contains(&rate), "injected failure rate {rate:.3}");
    Ok(format!(
        "1000 jobs: {} done, {} dead; {} claims, {failures} injected failures {:?}, {} stale acks rejected, FIFO and lease exclusivity held",
        done.len(),
        jobs.len() - done.len(),
        shared.claims,
        *injected,
        shared.stale,
    ))
}

fn queue_worker(
    seed: u64,
    svc: &Service,
    clock: &ManualClock,
    worker: &Principal,
    shared: &Mutex<Shared>,
    injected: &Mutex<BTreeMap<&'static str, usize>>,
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3 + seed);
    let mut abandoned: Vec<(usize, u32)> = Vec::new();
    loop {
        let claimed: ClaimedJob = {
            let mut guard = shared.lock().unwrap();
            let s = &mut *guard;
            clock.advance_millis(10);
            let now = clock.now().millis();
            s.model.reap(now);
            let expected = s.model.next_ready();
            let got = svc
                .claim(worker, &ClaimRequest { worker_kind: "phq8".into(), lease_secs: Some(LEASE_SECS) })
                .map_err(hg_err)?;
            match (got, expected) {
                (Some(c), Some(want)) => {
                    let i = s.model.index[&c.job.job_id];
                    if i != want {
                        s.violations.push(format!("claimed job {i} while job {want} was the oldest ready"));
                    }
                    let m = &mut s.model.jobs[i];
                    m.state = JobState::Leased;
                    m.attempts += 1;
                    m.expires = c.job.lease_expires_at.map_or(0, |t| t.millis());
                    if c.job.attempts != m.attempts {
                        let msg = format!("job {i}: attempt {} but model expects {}", c.job.attempts, m.attempts);
                        s.violations.push(msg);
                    }
                    let until = m.expires;
                    s.leases.push(Lease { job: i, attempt: c.job.attempts, from: now, until });
                    s.claims += 1;
                    c
                }
                (None, None) => {
                    if s.model.jobs.iter().all(|j| j.state.is_terminal()) {
                        return Ok(());
                    }
                    // Only leases nobody will ack remain: let them expire.
                    let mine_only = s
                        .model
                        .jobs
                        .iter()
                        .enumerate()
                        .filter(|(_, j)| j.state == JobState::Leased)
                        .all(|(i, j)| abandoned.contains(&(i, j.attempts)));
                    if mine_only {
                        clock.advance_millis((LEASE_SECS * 1000.0) as i64 + 1);
                    }
                    drop(guard);
                    std::thread::sleep(Duration::from_millis(1));
                    continue;
                }
                (got, want) => {
                    s.violations.push(format!("claim returned {:?}, model expected {want:?}", got.map(|c| c.job.job_id)));
                    return Ok(());
                }
            }
        };
        let i = shared.lock().unwrap().model.index[&claimed.job.job_id];
        let attempt = claimed.job.attempts;
        let roll: f64 = rng.random();
        if roll < 0.02 {
            // Crash: the lease is simply never settled.
            *injected.lock().unwrap().entry("crash").or_default() += 1;
            abandoned.push((i, attempt));
            continue;
        }
        let outcome = if roll < 0.04 {
            *injected.lock().unwrap().entry("analytic_error").or_default() += 1;
            Outcome::Failure { reason: "injected".into() }
        } else {
            for dp in &claimed.datapoints {
                let Payload::Text { text } = &dp.payload else { return Err("text payload expected".into()) };
                let (_, scored) = score_document(text.as_bytes()).map_err(|e| e.to_string())?;
                svc.submit_result(
                    worker,
                    &SubmitResult {
                        datapoint_id: dp.datapoint_id.clone(),
                        dataset_id: Some(claimed.dataset.dataset_id.clone()),
                        worker_kind: "phq8".into(),
                        schema_version: 1,
                        body: scored.to_body(),
                    },
                )
                .map_err(hg_err)?;
            }
            Outcome::Success
        };
        let mut guard = shared.lock().unwrap();
        let s = &mut *guard;
        if roll >= 0.04 && roll < 0.05 {
            // Stall past the lease before acking.
            *injected.lock().unwrap().entry("stall").or_default() += 1;
            clock.advance_millis((LEASE_SECS * 1000.0) as i64 + 1);
        }
        let now = clock.now().millis();
        let live = s.model.live(i, attempt, now);
        let got = svc.ack(worker, &claimed.job.job_id, &AckRequest { outcome: outcome.clone(), lease_attempts: attempt });
        match (got, live) {
            (Ok(job), true) => {
                let m = &mut s.model.jobs[i];
                m.state = match outcome {
                    Outcome::Success => JobState::Done,
                    Outcome::Failure { .. } if m.attempts <= s.model.max_retries => JobState::Ready,
                    Outcome::Failure { .. } => JobState::Dead,
                };
                if job.state != s.model.jobs[i].state {
                    let msg = format!("job {i}: ack left {:?}, model {:?}", job.state, s.model.jobs[i].state);
                    s.violations.push(msg);
                }
                if let Some(l) = s.leases.iter_mut().rev().find(|l| l.job == i && l.attempt == attempt) {
                    l.until = l.until.min(now);
                }
            }
            (Err(e), false) if e.code == ErrorCode::StaleLease => s.stale += 1,
            (got, live) => s.violations.push(format!("job {i} attempt {attempt}: ack {got:?} with live={live}")),
        }
    }
}

/// Everything one study owns, as seen over HTTP.
struct Tenant {
    study: StudyId,
    researcher: Client,
    device: Client,
    device_id: String,
    subject: SubjectId,
    cohort: CohortId,
    testset: TestSet,
    rule: RuleId,
    occurrence: hg_core::OccurrenceId,
    digest: String,
}

async fn tenant(base: &Client, name: &str) -> Result<Tenant, HgError> {
    let made = base.create_study(name).await?;
    let researcher = base.with_token(&made.token);
    let study = made.study.study_id;
    let device_id = format!("{name}-watch");
    let s = researcher
        .add_subject(&study, &NewSubject { raw_id: Some(format!("{name}-p1")), device_id: Some(device_id.clone()), ..Default::default() })
        .await?;
    let device = base.with_token(s.device_token.as_deref().unwrap_or_default());
    let subject = s.subject.subject_id;
    let cohort = researcher
        .define_cohort(&study, &NewCohort { name: "c".into(), selector: CohortSelector::Explicit(vec![subject.clone()]) })
        .await?
        .cohort_id;
    let testset = researcher
        .create_testset(&study, &NewTestSet { name: "walk".into(), tests: vec![NewTest { kind: TestKind::Tug, params: json!({}) }] })
        .await?;
    let task = researcher
        .create_task(
            &study,
            &NewTask {
                testset_id: testset.testset_id.clone(),
                cohort_id: cohort.clone(),
                schedule: Schedule {
                    mode: ScheduleMode::Once,
                    window_start: TimeOfDay::hms(9, 0, 0).unwrap(),
                    window_end: TimeOfDay::hms(21, 0, 0).unwrap(),
                    start_date: None,
                    end_date: None,
                },
            },
        )
        .await?;
    let rule = researcher.create_rule(&study, &new_rule(&testset.testset_id, &cohort)).await?.rule_id;
    let doc = json!({
        "schema": "accel/v1", "subject_id": subject, "device_id": device_id, "sample_rate_hz": 50.0,
        "start_time": "2026-03-02T10:00:00Z", "units": "m/s2", "samples": [[0.0, 0.0, 9.81]],
    });
    let occurrence = task.occurrences[0].occurrence_id.clone();
    let up = device
        .upload(&UploadEnvelope {
            occurrence_id: occurrence.clone(),
            test_id: testset.tests[0].test_id.clone(),
            idempotency_key: "k".into(),
            collected_at: Timestamp::at(day0(), TimeOfDay::hms(10, 0, 0).unwrap()),
            clock_offset_ms: 0,
            payload: UploadPayload::File {
                media_type: "application/json".into(),
                data_b64: base64::engine::general_purpose::STANDARD.encode(doc.to_string()),
            },
        })
        .await?;
    let Payload::File { object } = up.datapoint.payload else { return Err(HgError::internal("file payload expected")) };
    Ok(Tenant { study, researcher, device, device_id, subject, cohort, testset, rule, occurrence, digest: object.sha256 })
}

fn new_rule(target: &TestSetId, source: &CohortId) -> NewRule {
    NewRule {
        name: "slow".into(),
        trigger: Trigger::OnResult { worker_kind: "tug".into() },
        predicate: Predicate { metric: "daily_mean".into(), comparator: Comparator::Gt, value: 13.5 },
        action: serde_json::from_value(json!({
            "target_testset_id": target, "sub_cohort_name": "slow", "source_cohort_id": source,
        }))
        .unwrap(),
        active: true,
    }
}

const TENANCY_OPS: usize = 26;

/// Runs operation `op` with credential `c` (belonging to tenant `a`)
/// against the entities of tenant `b`.
async fn cross(c: &Client, a: &Tenant, b: &Tenant, op: usize) -> Result<(), HgError> {
    let once = Schedule {
        mode: ScheduleMode::Once,
        window_start: TimeOfDay::hms(9, 0, 0).unwrap(),
        window_end: TimeOfDay::hms(21, 0, 0).unwrap(),
        start_date: None,
        end_date: None,
    };
    let phq8 = || NewTestSet { name: "x".into(), tests: vec![NewTest { kind: TestKind::Phq8, params: json!({}) }] };
    match op {
        0 => c.summary(&b.study).await.map(drop),
        1 => c.list_subjects(&b.study).await.map(drop),
        2 => c.add_subject(&b.study, &NewSubject::default()).await.map(drop),
        3 => c
            .define_cohort(&a.study, &NewCohort { name: "x".into(), selector: CohortSelector::Explicit(vec![b.subject.clone()]) })
            .await
            .map(drop),
        4 => c.define_cohort(&b.study, &NewCohort { name: "x".into(), selector: CohortSelector::Explicit(vec![]) }).await.map(drop),
        5 => c.create_testset(&b.study, &phq8()).await.map(drop),
        6 => c
            .create_task(&a.study, &NewTask { testset_id: b.testset.testset_id.clone(), cohort_id: a.cohort.clone(), schedule: once })
            .await
            .map(drop),
        7 => c
            .create_task(&a.study, &NewTask { testset_id: a.testset.testset_id.clone(), cohort_id: b.cohort.clone(), schedule: once })
            .await
            .map(drop),
        8 => c.create_rule(&a.study, &new_rule(&b.testset.testset_id, &a.cohort)).await.map(drop),
        9 => c.create_rule(&a.study, &new_rule(&a.testset.testset_id, &b.cohort)).await.map(drop),
        10 => c.evaluate_rule(&a.study, &b.rule, None).await.map(drop),
        11 => c.evaluate_rule(&b.study, &b.rule, None).await.map(drop),
        12 => c.poll_tasks(&b.device_id, None).await.map(drop),
        13 => c
            .upload(&UploadEnvelope {
                occurrence_id: b.occurrence.clone(),
                test_id: b.testset.tests[0].test_id.clone(),
                idempotency_key: "intruder".into(),
                collected_at: Timestamp::at(day0(), TimeOfDay::hms(10, 0, 0).unwrap()),
                clock_offset_ms: 0,
                payload: UploadPayload::Text { text: "{}".into() },
            })
            .await
            .map(drop),
        14 => c.results(&b.study, &ResultQuery::default()).await.map(drop),
        15 => c.results(&a.study, &ResultQuery { subject: Some(b.subject.clone()), ..Default::default() }).await.map(drop),
        16 => c.export(&b.study).await.map(drop),
        17 => c.device_token(&a.study, &b.device_id).await.map(drop),
        18 => c.object(&b.digest).await.map(drop),
        19 => c.list_occurrences(&b.study).await.map(drop),
        20 => c.list_cohorts(&b.study).await.map(drop),
        21 => c.list_rules(&b.study).await.map(drop),
        22 => c.list_testsets(&b.study).await.map(drop),
        23 => c.list_tasks(&b.study).await.map(drop),
        24 => c.claim("tug", None).await.map(drop),
        _ => c.list_jobs(None, None).await.map(drop),
    }
}

fn multi_tenancy() -> Check {
    runtime().block_on(async {
        let dir = tempfile::tempdir().unwrap();
        let srv = live_server(dir.path(), TimeOfDay::hms(9, 30, 0).unwrap()).await;
        let base = Client::new(&srv.url()).map_err(hg_err)?;
        let mut tenants = Vec::new();
        for i in 0..4 {
            tenants.push(tenant(&base, &format!("tenant-{i}")).await.map_err(hg_err)?);
        }
        // Controls: the same requests succeed inside the owning study.
        for op in [0, 1, 14, 16, 19, 20, 21, 22, 23] {
            let t = &tenants[0];
            cross(&t.researcher, t, t, op).await.map_err(|e| format!("own-study op {op}: {}", hg_err(e)))?;
        }
        tenants[1].researcher.object(&tenants[1].digest).await.map_err(hg_err)?;
        tenants[1].device.poll_tasks(&tenants[1].device_id, None).await.map_err(hg_err)?;

        let mut rng = ChaCha8Rng::seed_from_u64(0x7e4a);
        let mut ops_seen = BTreeSet::new();
        for n in 0..200 {
            let a = rng.random_range(0..tenants.len());
            let b = (a + rng.random_range(1..tenants.len())) % tenants.len();
            let as_device = rng.random_bool(0.5);
            let op = rng.random_range(0..TENANCY_OPS);
            let cred = if as_device { &tenants[a].device } else { &tenants[a].researcher };
            let r = cross(cred, &tenants[a], &tenants[b], op).await;
            let who = if as_device { "device" } else { "researcher" };
            match r {
                Err(e) if e.code == ErrorCode::Forbidden => {}
                other => return Err(format!("pair {n}: {who} of tenant {a} op {op} on tenant {b} gave {other:?}")),
            }
            ops_seen.insert(op);
        }
        srv.shutdown().await.map_err(hg_err)?;
        Ok(format!("200 cross-study pairs over {} operations, 100% FORBIDDEN", ops_seen.len()))
    })
}

/// Passes calls through but never returns from an ack, so the worker can
/// be killed while it holds a lease with its result already stored.
struct Hanging {
    inner: HttpBackend,
    submitted: Arc<Notify>,
}

#[async_trait]
impl Backend for Hanging {
    async fn claim(&self, kind: &str, lease: f64) -> hg_core::Result<Option<ClaimedJob>> {
        self.inner.claim(kind, lease).await
    }
    async fn object(&self, digest: &str) -> hg_core::Result<Vec<u8>> {
        self.inner.object(digest).await
    }
    async fn submit(&self, req: &SubmitResult) -> hg_core::Result<AnalyticResult> {
        let r = self.inner.submit(req).await;
        self.submitted.notify_one();
        r
    }
    async fn ack(&self, _: &JobId, _: &AckRequest) -> hg_core::Result<Job> {
        std::future::pending().await
    }
}

async fn hg_worker_process(url: &str) -> Result<serde_json::Value, String> {
    let url = url.to_string();
    let out = tokio::task::spawn_blocking(move || {
        Command::new(env!("CARGO_BIN_EXE_hg"))
            .args(["--server", &url, "--token", OPS, "--json", "worker", "--kind", "phq8", "--exit-when-idle"])
            .output()
    })
    .await
    .unwrap()
    .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "hg worker exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn crash_recovery() -> Check {
    runtime().block_on(async {
        let dir = tempfile::tempdir().unwrap();
        let srv = live_server(dir.path(), TimeOfDay::hms(11, 0, 0).unwrap()).await;
        let url = srv.url();
        let base = Client::new(&url).map_err(hg_err)?;
        let ops = base.with_token(OPS);
        let plan = setup_study(&base, &Scenario { study_name: "crash".into(), subjects: 1, ..Default::default() })
            .await
            .map_err(hg_err)?;
        ops.tick(false).await.map_err(hg_err)?;
        let d = &plan.devices[0];
        let dc = base.with_token(&d.token);
        let occ = dc.poll_tasks(&d.device_id, None).await.map_err(hg_err)?.pop().ok_or("no occurrence")?;
        let text = json!({
            "schema": "phq8/v1",
            "subject_id": occ.subject_id,
            "occurrence_id": occ.occurrence_id,
            "completed_at": "2026-03-02T11:00:00Z",
            "responses": (1..=8).map(|q| json!({"question": q, "answer": q % 4})).collect::<Vec<_>>(),
        })
        .to_string();
        dc.upload(&UploadEnvelope {
            occurrence_id: occ.occurrence_id.clone(),
            test_id: occ.tests[0].test_id.clone(),
            idempotency_key: "crash-1".into(),
            collected_at: Timestamp::at(day0(), TimeOfDay::hms(11, 0, 0).unwrap()),
            clock_offset_ms: 0,
            payload: UploadPayload::Text { text },
        })
        .await
        .map_err(hg_err)?;
        ensure!(ops.tick(true).await.map_err(hg_err)?.published.len() == 1, "expected one dataset");

        let submitted = Arc::new(Notify::new());
        let hanging = Arc::new(Hanging { inner: HttpBackend::new(&url, OPS).map_err(hg_err)?, submitted: Arc::clone(&submitted) });
        let desc = WorkerDescriptor::standard("phq8", 1).map_err(hg_err)?;
        let opts = RunOptions { lease_secs: 30.0, idle_poll: Duration::from_millis(10), ..Default::default() };
        let (_stop, rx) = watch::channel(false);
        let handle = tokio::spawn(async move {
            run_worker(hanging, &desc, Arc::from(standard_analytic(TestKind::Phq8)), opts, rx).await
        });
        tokio::time::timeout(Duration::from_secs(20), submitted.notified()).await.map_err(|_| "worker never submitted")?;
        handle.abort();
        ensure!(handle.await.is_err_and(|e| e.is_cancelled()), "worker was not killed");

        let researcher = base.with_token(&plan.researcher_token);
        let before = researcher.results(&plan.study_id, &ResultQuery::default()).await.map_err(hg_err)?;
        let job = ops.list_jobs(None, None).await.map_err(hg_err)?.pop().ok_or("no job")?;
        ensure!((job.state, job.attempts) == (JobState::Leased, 1), "after kill: {job:?}");
        let idle = hg_worker_process(&url).await?;
        ensure!(idle["processed"] == 0, "claimed under a live lease: {idle}");

        let now = ops.clock().await.map_err(hg_err)?;
        ops.set_clock(now.plus_secs_f64(31.0)).await.map_err(hg_err)?;
        let rerun = hg_worker_process(&url).await?;
        ensure!(rerun["processed"] == 1, "redelivery not processed: {rerun}");
        let job = ops.list_jobs(None, None).await.map_err(hg_err)?.pop().ok_or("no job")?;
        ensure!((job.state, job.attempts) == (JobState::Done, 2), "after redelivery: {job:?}");
        let after = researcher.results(&plan.study_id, &ResultQuery::default()).await.map_err(hg_err)?;
        ensure!(after.len() == 1, "{} result rows", after.len());
        ensure!(before.len() == 1 && before[0].result_id == after[0].result_id, "result row was replaced");
        srv.shutdown().await.map_err(hg_err)?;
        Ok("killed holding a lease, redelivered on attempt 2 after expiry, 1 result row".into())
    })
}
