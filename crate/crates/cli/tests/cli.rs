use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use hg_core::{TimeOfDay, Timestamp};
use hg_ctm::ServeConfig;
use serde_json::Value;

const OPS: &str = "hgt_cli_ops";
const EXAMPLE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/study.example.yaml");

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }
}

fn hg_sync(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_hg"))
        .args(args)
        .env_remove("HG_TOKEN")
        .env_remove("HG_SERVER")
        .env_remove("HG_WORKER_TOKEN")
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

async fn hg(args: &[&str]) -> Run {
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    tokio::task::spawn_blocking(move || hg_sync(&args.iter().map(String::as_str).collect::<Vec<_>>()))
        .await
        .unwrap()
}

async fn server(dir: &Path) -> hg_ctm::Server {
    hg_ctm::start(ServeConfig {
        port: 0,
        data_dir: dir.to_path_buf(),
        tick_secs: 0.0,
        virtual_start: Some(Timestamp::at(
            chrono::NaiveDate::from_ymd_opt(2026, 3, 2).unwrap(),
            TimeOfDay::hms(6, 0, 0).unwrap(),
        )),
        worker_token: Some(OPS.into()),
        ..Default::default()
    })
    .await
    .unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn get(port: u16, path: &str) -> String {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    body
}

fn sigterm(child: &Child) {
    let ok = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(ok.success());
}

fn wait(child: &mut Child, limit: Duration) -> i32 {
    let t = Instant::now();
    loop {
        if let Some(s) = child.try_wait().unwrap() {
            return s.code().unwrap_or(-1);
        }
        assert!(t.elapsed() < limit, "process did not exit");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn serve_creates_dir_answers_and_stops_on_signal() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("nested/data");
    let port = free_port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_hg"))
        .args(["serve", "--port", &port.to_string(), "--data-dir", data.to_str().unwrap(), "--tick-secs", "0"])
        .env_remove("HG_PORT")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    assert!(line.starts_with(&format!("listening on http://127.0.0.1:{port}")), "{line}");
    assert!(data.join("worker_token").is_file());
    let health = get(port, "/v1/healthz");
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");

    let busy = hg_sync(&["serve", "--port", &port.to_string(), "--data-dir", tmp.path().join("other").to_str().unwrap()]);
    assert_eq!(busy.code, 2, "{}", busy.stderr);
    assert!(busy.stderr.contains("UNAVAILABLE"), "{}", busy.stderr);

    sigterm(&child);
    assert_eq!(wait(&mut child, Duration::from_secs(20)), 0);
    let mut rest = String::new();
    stdout.read_to_string(&mut rest).unwrap();
    assert_eq!(rest.trim(), "stopped");
    assert!(TcpStream::connect(("127.0.0.1", port)).is_err());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(hg_sync(&["frobnicate"]).code, 1);
    assert_eq!(hg_sync(&["sim", "--subjects", "ten"]).code, 1);
    assert_eq!(hg_sync(&["--help"]).code, 0);
    let w = hg_sync(&["worker", "--kind", "phq8"]);
    assert_eq!(w.code, 1);
    assert!(w.stderr.contains("token"), "{}", w.stderr);
    assert_eq!(hg_sync(&["worker", "--kind", "gait", "--token", "x"]).code, 1);
    assert_eq!(hg_sync(&["study", "apply", "/no/such/manifest.yaml"]).code, 1);
}

#[test]
fn unreachable_server_exits_two() {
    let port = free_port();
    let r = hg_sync(&["--server", &format!("http://127.0.0.1:{port}"), "--token", OPS, "queue", "inspect"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn pose_csv_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("pose.csv");
    std::fs::write(&input, "t,shoulder_y,hip_y\n0.0,300,400\n0.1,299,399\n0.2,298,398\n").unwrap();
    let out = tmp.path().join("pose.json");
    let r = hg_sync(&["pose-csv", input.to_str().unwrap(), "--fps", "10", "-o", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let doc = hg_core::payload::PoseDocument::parse(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(doc.frames.len(), 3);
    std::fs::write(&input, "t,shoulder_y,hip_y\n0.0,300\n").unwrap();
    let bad = hg_sync(&["--json", "pose-csv", input.to_str().unwrap()]);
    assert_eq!(bad.code, 3);
    let err: Value = serde_json::from_str(bad.stderr.trim()).unwrap();
    assert_eq!(err["error"]["code"], "SCHEMA_MISMATCH");
}

#[test]
fn tug_train_writes_a_loadable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m.json");
    let r = hg_sync(&["--json", "tug-train", "--episodes", "80", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json()["holdout"], 16);
    let m = hg_analytics::tug::TugModel::load(&out).unwrap();
    assert_eq!(m.kind(), "forest");
    assert!(r.json()["holdout_mae"].as_f64().unwrap() < 3.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn study_apply_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path()).await;
    let url = srv.url();
    let first = hg(&["--server", &url, "--json", "study", "apply", EXAMPLE]).await;
    assert_eq!(first.code, 0, "{}", first.stderr);
    let rep = first.json();
    assert_eq!(rep["cohorts"].as_array().unwrap().len(), 2);
    assert_eq!(rep["testsets"].as_array().unwrap().len(), 3);
    assert_eq!(rep["rules"].as_array().unwrap().len(), 1);
    assert_eq!(rep["created"], 1 + 4 + 2 + 3 + 2 + 1);
    assert_eq!(rep["device_tokens"].as_object().unwrap().len(), 3);
    let token = rep["researcher_token"].as_str().unwrap().to_string();

    let again = hg(&["--server", &url, "--token", &token, "--json", "study", "apply", EXAMPLE]).await;
    assert_eq!(again.code, 0, "{}", again.stderr);
    assert_eq!(again.json()["created"], 0);
    assert!(again.json().get("researcher_token").is_none());
    for key in ["subjects", "cohorts", "testsets", "tasks", "rules"] {
        let ids = |v: &Value| v[key].as_array().unwrap().iter().map(|a| a["id"].clone()).collect::<Vec<_>>();
        assert_eq!(ids(&rep), ids(&again.json()), "{key}");
    }
    let summary = hg_ctm::Client::new(&url).unwrap().with_token(&token);
    let study = hg_core::StudyId::from(rep["study"]["id"].as_str().unwrap().to_string());
    let s = summary.summary(&study).await.unwrap();
    assert_eq!(s.cohorts.len(), 2);
    assert_eq!(s.tasks.len(), 2);
    assert_eq!(s.rules.len(), 1);
    let over65 = s.cohorts.iter().find(|c| c.name == "over-65").unwrap();
    assert_eq!(over65.members, 2);

    let conflict = hg(&["--server", &url, "study", "apply", EXAMPLE]).await;
    assert_eq!(conflict.code, 3);
    assert!(conflict.stderr.contains("--token"), "{}", conflict.stderr);

    let bad = dir.path().join("bad.yaml");
    std::fs::write(&bad, std::fs::read_to_string(EXAMPLE).unwrap().replace("kind: tug", "kind: treadmill")).unwrap();
    let r = hg(&["--server", &url, "study", "apply", bad.to_str().unwrap()]).await;
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("testsets[1].tests[0].kind"), "{}", r.stderr);
    srv.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sim_worker_export_and_queue() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path()).await;
    let url = srv.url();
    let report = dir.path().join("report.json");
    let truth = dir.path().join("truth.jsonl");
    let r = hg(&[
        "--server", &url, "--token", OPS, "sim", "--subjects", "10", "--days", "3", "--compliance", "1",
        "--seed", "5", "--study-name", "cli-sim", "--report", report.to_str().unwrap(), "--truth",
        truth.to_str().unwrap(),
    ])
    .await;
    assert_eq!(r.code, 0, "{}\n{}", r.stdout, r.stderr);
    let rep: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(rep["completed"], 30);
    assert_eq!(rep["server"]["datapoints"], 30);
    assert_eq!(std::fs::read_to_string(&truth).unwrap().lines().count(), 30);

    let q = hg(&["--server", &url, "--token", OPS, "--json", "queue", "inspect", "--state", "done"]).await;
    assert_eq!(q.code, 0, "{}", q.stderr);
    assert_eq!(q.json()["stats"]["done"], 3);
    assert_eq!(q.json()["jobs"].as_array().unwrap().len(), 3);
    assert_eq!(hg(&["--server", &url, "--token", OPS, "queue", "inspect", "--state", "gone"]).await.code, 1);

    // The simulator keeps its tokens; mint a researcher view through the vault instead.
    let svc = &srv.service;
    let study = svc.list_studies(&svc.authenticate(Some(OPS)).unwrap()).unwrap().into_iter().find(|s| s.name == "cli-sim").unwrap();
    let out = dir.path().join("export");
    let forbidden = hg(&["--server", &url, "--token", OPS, "export", study.study_id.as_str(), "--out", out.to_str().unwrap()]).await;
    assert_eq!(forbidden.code, 3, "{}", forbidden.stderr);
    assert!(forbidden.stderr.contains("FORBIDDEN"), "{}", forbidden.stderr);
    srv.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn export_after_worker_run() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path()).await;
    let url = srv.url();
    let c = hg_ctm::Client::new(&url).unwrap();
    let scenario = hg_sim::Scenario { study_name: "export".into(), subjects: 10, seed: 2, ..Default::default() };
    let plan = hg_sim::setup_study(&c, &scenario).await.unwrap();
    let empty = hg_ctm::Client::new(&url).unwrap().create_study("empty").await.unwrap();

    // Devices upload; the worker binary then drains the queue.
    let ops = c.with_token(OPS);
    let start = chrono::NaiveDate::from_ymd_opt(2026, 3, 2).unwrap();
    for day in 0..3u64 {
        let date = start + chrono::Days::new(day);
        ops.set_clock(Timestamp::at(date, TimeOfDay::hms(12, 0, 0).unwrap())).await.unwrap();
        ops.tick(false).await.unwrap();
        for d in &plan.devices {
            let dc = c.with_token(&d.token);
            for occ in dc.poll_tasks(&d.device_id, None).await.unwrap() {
                let text = serde_json::json!({
                    "schema": "phq8/v1",
                    "subject_id": occ.subject_id,
                    "occurrence_id": occ.occurrence_id,
                    "completed_at": "2026-03-02T12:00:00Z",
                    "responses": (1..=8).map(|q| serde_json::json!({"question": q, "answer": 1})).collect::<Vec<_>>(),
                })
                .to_string();
                dc.upload(&hg_core::payload::UploadEnvelope {
                    occurrence_id: occ.occurrence_id.clone(),
                    test_id: occ.tests[0].test_id.clone(),
                    idempotency_key: format!("{}-{day}", d.raw_id),
                    collected_at: Timestamp::at(date, TimeOfDay::hms(12, 0, 0).unwrap()),
                    clock_offset_ms: 0,
                    payload: hg_core::payload::UploadPayload::Text { text },
                })
                .await
                .unwrap();
            }
        }
    }
    ops.tick(true).await.unwrap();
    let w = hg(&["--server", &url, "--token", OPS, "--json", "worker", "--kind", "phq8", "--concurrency", "2", "--exit-when-idle"]).await;
    assert_eq!(w.code, 0, "{}", w.stderr);
    assert_eq!(w.json()["results"], 30);

    let out = dir.path().join("out");
    let r = hg(&["--server", &url, "--token", &plan.researcher_token, "--json", "export", plan.study_id.as_str(), "--out", out.to_str().unwrap()]).await;
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json()["results"], 30);
    let mut rows = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let header = rows.headers().unwrap().clone();
    assert_eq!(&header[0], "result_id");
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 30);
    let col = header.iter().position(|h| h == "total_score").unwrap();
    assert!(records.iter().all(|r| &r[col] == "8"));
    let ids: std::collections::BTreeSet<_> = records.iter().map(|r| r[0].to_string()).collect();
    assert_eq!(ids.len(), 30);
    assert_eq!(std::fs::read_to_string(out.join("datapoints.jsonl")).unwrap().lines().count(), 30);
    let vault = std::fs::read_to_string(out.join("vault.csv")).unwrap();
    assert_eq!(vault.lines().next(), Some("raw_id,pseudonym,study_id"));
    assert_eq!(vault.lines().count(), 11);

    let empty_out = dir.path().join("empty");
    let r = hg(&["--server", &url, "--token", &empty.token, "export", empty.study.study_id.as_str(), "--out", empty_out.to_str().unwrap()]).await;
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(std::fs::read_to_string(empty_out.join("results.csv")).unwrap().lines().count(), 1);
    assert_eq!(std::fs::read_to_string(empty_out.join("datapoints.jsonl")).unwrap(), "");

    let device = &plan.devices[0].token;
    let r = hg(&["--server", &url, "--token", device, "export", plan.study_id.as_str(), "--out", out.to_str().unwrap()]).await;
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("FORBIDDEN"), "{}", r.stderr);
    let r = hg(&["--server", &url, "--token", &empty.token, "export", plan.study_id.as_str(), "--out", out.to_str().unwrap()]).await;
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("FORBIDDEN"), "{}", r.stderr);
    srv.shutdown().await.unwrap();
}
