//! Typed client for the `/v1` API, used by workers, the simulator and the
//! CLI.

use std::time::Duration;

use chrono::NaiveDate;
use hg_core::model::{AnalyticResult, Cohort, Rule, Study, Subject, TestSet, Task, TaskOccurrence};
use hg_core::payload::UploadEnvelope;
use hg_core::{ErrorCode, HgError, JobId, Result, RuleId, StudyId, Timestamp};
use hg_store::{Ingested, Job, JobState, QueueStats};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::http::{ClockBody, Meta};
use crate::service::*;

#[derive(Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
    token: Option<String>,
}

#[derive(Deserialize)]
struct WireError {
    code: ErrorCode,
    message: String,
}

fn unavailable(e: reqwest::Error) -> HgError {
    HgError::new(ErrorCode::Unavailable, e.to_string())
}

impl Client {
    pub fn new(base_url: &str) -> Result<Self> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(HgError::internal)?;
        Ok(Self {
            http,
            base: base_url.trim_end_matches('/').to_owned(),
            token: None,
        })
    }

    /// The same connection pool with a different bearer token.
    pub fn with_token(&self, token: &str) -> Self {
        Self {
            token: Some(token.to_owned()),
            ..self.clone()
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    async fn send(&self, mut req: reqwest::RequestBuilder) -> Result<reqwest::Response> {
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().await.map_err(unavailable)?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(unavailable)?;
        Err(match serde_json::from_slice::<WireError>(&bytes) {
            Ok(w) => HgError::new(w.code, w.message),
            Err(_) if status.is_server_error() => HgError::new(ErrorCode::Unavailable, format!("HTTP {status}")),
            Err(_) => HgError::internal(format!("HTTP {status}")),
        })
    }

    async fn decode<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder) -> Result<T> {
        let bytes = self.send(req).await?.bytes().await.map_err(unavailable)?;
        serde_json::from_slice(&bytes).map_err(|e| HgError::internal(format!("bad response body: {e}")))
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.decode(self.http.get(self.url(path))).await
    }

    pub async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.decode(self.http.post(self.url(path)).json(body)).await
    }

    pub async fn post_empty<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.decode(self.http.post(self.url(path))).await
    }

    pub async fn bytes(&self, path: &str) -> Result<Vec<u8>> {
        let resp = self.send(self.http.get(self.url(path))).await?;
        Ok(resp.bytes().await.map_err(unavailable)?.to_vec())
    }

    pub async fn healthz(&self) -> Result<serde_json::Value> {
        self.get("/v1/healthz").await
    }

    pub async fn meta(&self) -> Result<Meta> {
        self.get("/v1/meta").await
    }

    pub async fn create_study(&self, name: &str) -> Result<StudyCreated> {
        self.post("/v1/studies", &CreateStudy { name: name.to_owned() }).await
    }

    pub async fn list_studies(&self) -> Result<Vec<Study>> {
        self.get("/v1/studies").await
    }

    pub async fn summary(&self, study: &StudyId) -> Result<StudySummary> {
        self.get(&format!("/v1/studies/{study}/summary")).await
    }

    pub async fn add_subject(&self, study: &StudyId, req: &NewSubject) -> Result<SubjectCreated> {
        self.post(&format!("/v1/studies/{study}/subjects"), req).await
    }

    pub async fn list_subjects(&self, study: &StudyId) -> Result<Vec<Subject>> {
        self.get(&format!("/v1/studies/{study}/subjects")).await
    }

    pub async fn device_token(&self, study: &StudyId, device_id: &str) -> Result<String> {
        #[derive(Deserialize)]
        struct T {
            token: String,
        }
        let t: T = self.post_empty(&format!("/v1/studies/{study}/devices/{device_id}/token")).await?;
        Ok(t.token)
    }

    pub async fn define_cohort(&self, study: &StudyId, req: &NewCohort) -> Result<Cohort> {
        self.post(&format!("/v1/studies/{study}/cohorts"), req).await
    }

    pub async fn list_cohorts(&self, study: &StudyId) -> Result<Vec<Cohort>> {
        self.get(&format!("/v1/studies/{study}/cohorts")).await
    }

    pub async fn create_testset(&self, study: &StudyId, req: &NewTestSet) -> Result<TestSet> {
        self.post(&format!("/v1/studies/{study}/testsets"), req).await
    }

    pub async fn list_testsets(&self, study: &StudyId) -> Result<Vec<TestSet>> {
        self.get(&format!("/v1/studies/{study}/testsets")).await
    }

    pub async fn create_task(&self, study: &StudyId, req: &NewTask) -> Result<TaskCreated> {
        self.post(&format!("/v1/studies/{study}/tasks"), req).await
    }

    pub async fn list_tasks(&self, study: &StudyId) -> Result<Vec<Task>> {
        self.get(&format!("/v1/studies/{study}/tasks")).await
    }

    pub async fn list_occurrences(&self, study: &StudyId) -> Result<Vec<TaskOccurrence>> {
        self.get(&format!("/v1/studies/{study}/occurrences")).await
    }

    pub async fn create_rule(&self, study: &StudyId, req: &NewRule) -> Result<Rule> {
        self.post(&format!("/v1/studies/{study}/rules"), req).await
    }

    pub async fn list_rules(&self, study: &StudyId) -> Result<Vec<Rule>> {
        self.get(&format!("/v1/studies/{study}/rules")).await
    }

    pub async fn evaluate_rule(&self, study: &StudyId, rule: &RuleId, day: Option<NaiveDate>) -> Result<RuleEvaluation> {
        let q = day.map(|d| format!("?day={d}")).unwrap_or_default();
        self.post_empty(&format!("/v1/studies/{study}/rules/{rule}/evaluate{q}")).await
    }

    pub async fn results(&self, study: &StudyId, q: &ResultQuery) -> Result<Vec<AnalyticResult>> {
        let mut parts = Vec::new();
        if let Some(s) = &q.subject {
            parts.push(format!("subject={s}"));
        }
        if let Some(t) = &q.test {
            parts.push(format!("test={t}"));
        }
        if let Some(t) = q.from {
            parts.push(format!("from={}", t.to_string()));
        }
        if let Some(t) = q.to {
            parts.push(format!("to={}", t.to_string()));
        }
        let qs = if parts.is_empty() { String::new() } else { format!("?{}", parts.join("&")) };
        self.get(&format!("/v1/studies/{study}/results{qs}")).await
    }

    pub async fn export(&self, study: &StudyId) -> Result<ExportBundle> {
        self.get(&format!("/v1/studies/{study}/export")).await
    }

    pub async fn poll_tasks(&self, device_id: &str, now: Option<Timestamp>) -> Result<Vec<OccurrenceDescriptor>> {
        let q = now.map(|t| format!("?now={}", t.to_string())).unwrap_or_default();
        self.get(&format!("/v1/devices/{device_id}/pending-tasks{q}")).await
    }

    pub async fn upload(&self, env: &UploadEnvelope) -> Result<Ingested> {
        self.post("/v1/uploads", env).await
    }

    pub async fn claim(&self, worker_kind: &str, lease_secs: Option<f64>) -> Result<Option<ClaimedJob>> {
        let req = ClaimRequest {
            worker_kind: worker_kind.to_owned(),
            lease_secs,
        };
        self.post("/v1/queue/claim", &req).await
    }

    pub async fn ack(&self, job: &JobId, req: &AckRequest) -> Result<Job> {
        self.post(&format!("/v1/queue/{job}/ack"), req).await
    }

    pub async fn submit_result(&self, req: &SubmitResult) -> Result<AnalyticResult> {
        self.post("/v1/internal/results", req).await
    }

    pub async fn object(&self, digest: &str) -> Result<Vec<u8>> {
        self.bytes(&format!("/v1/objects/{digest}")).await
    }

    pub async fn list_jobs(&self, state: Option<JobState>, kind: Option<&str>) -> Result<Vec<Job>> {
        let mut parts = Vec::new();
        if let Some(s) = state {
            parts.push(format!("state={}", s.as_str()));
        }
        if let Some(k) = kind {
            parts.push(format!("kind={k}"));
        }
        let qs = if parts.is_empty() { String::new() } else { format!("?{}", parts.join("&")) };
        self.get(&format!("/v1/queue/jobs{qs}")).await
    }

    pub async fn queue_stats(&self) -> Result<QueueStats> {
        self.get("/v1/queue/stats").await
    }

    pub async fn clock(&self) -> Result<Timestamp> {
        Ok(self.get::<ClockBody>("/v1/admin/clock").await?.now)
    }

    pub async fn set_clock(&self, now: Timestamp) -> Result<Timestamp> {
        Ok(self.post::<_, ClockBody>("/v1/admin/clock", &ClockBody { now }).await?.now)
    }

    pub async fn tick(&self, flush: bool) -> Result<TickReport> {
        self.post_empty(&format!("/v1/admin/tick?flush={flush}")).await
    }
}
