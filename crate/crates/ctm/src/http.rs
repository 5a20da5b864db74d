//! The `/v1` HTTP API.

use std::sync::Arc;

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{StatusCode, header};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use hg_core::model::OccurrenceStatus;
use hg_core::payload::UploadEnvelope;
use hg_core::*;
use hg_store::{JobState, OccurrenceFilter};
use serde::{Deserialize, Serialize};

use crate::service::*;

/// Shared state of the router.
#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Service>,
    /// Present in test mode; exposes the admin clock endpoints.
    pub manual_clock: Option<ManualClock>,
    pub tick_secs: f64,
    pub public_url: Option<String>,
}

/// An [`HgError`] rendered as `{code, message}`.
#[derive(Debug)]
pub struct ApiError(pub HgError);

impl From<HgError> for ApiError {
    fn from(e: HgError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(code = %self.0.code, message = %self.0.message, "request failed");
        }
        (status, Json(serde_json::json!({"code": self.0.code, "message": self.0.message}))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Runs a blocking service call off the async workers.
async fn blocking<T: Send + 'static>(
    s: &AppState,
    f: impl FnOnce(&Service) -> Result<T> + Send + 'static,
) -> ApiResult<T> {
    let svc = Arc::clone(&s.service);
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(HgError::internal(e)))?
        .map(Json)
        .map_err(ApiError)
}

/// The authenticated caller.
pub struct Auth(pub Principal);

impl FromRequestParts<AppState> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> std::result::Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(|t| t.trim().to_string());
        let svc = Arc::clone(&state.service);
        tokio::task::spawn_blocking(move || svc.authenticate(token.as_deref()))
            .await
            .map_err(|e| ApiError(HgError::internal(e)))?
            .map(Auth)
            .map_err(ApiError)
    }
}

/// JSON body that reports parse failures as VALIDATION errors.
pub struct Body<T>(pub T);

impl<T: serde::de::DeserializeOwned, S: Send + Sync> axum::extract::FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> std::result::Result<Self, Self::Rejection> {
        let bytes = axum::body::Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError(HgError::validation(e.to_string())))?;
        serde_json::from_slice(&bytes)
            .map(Body)
            .map_err(|e| ApiError(HgError::validation(format!("request body: {e}"))))
    }
}

/// Query string parsed into `T`, with parse failures as VALIDATION.
pub struct Q<T>(pub T);

impl<T: serde::de::DeserializeOwned, S: Send + Sync> FromRequestParts<S> for Q<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> std::result::Result<Self, Self::Rejection> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(v)| Q(v))
            .map_err(|e| ApiError(HgError::validation(e.body_text())))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/meta", get(meta))
        .route("/portal", get(portal))
        .route("/portal/", get(portal))
        .route("/v1/studies", post(create_study).get(list_studies))
        .route("/v1/studies/{id}", get(get_study))
        .route("/v1/studies/{id}/summary", get(summary))
        .route("/v1/studies/{id}/subjects", post(add_subject).get(list_subjects))
        .route("/v1/studies/{id}/devices/{device_id}/token", post(device_token))
        .route("/v1/studies/{id}/cohorts", post(define_cohort).get(list_cohorts))
        .route("/v1/studies/{id}/testsets", post(create_testset).get(list_testsets))
        .route("/v1/studies/{id}/tasks", post(create_task).get(list_tasks))
        .route("/v1/studies/{id}/occurrences", get(list_occurrences))
        .route("/v1/studies/{id}/rules", post(create_rule).get(list_rules))
        .route("/v1/studies/{id}/rules/{rid}/evaluate", post(evaluate_rule))
        .route("/v1/studies/{id}/rules/{rid}/runs", get(rule_runs))
        .route("/v1/studies/{id}/results", get(list_results))
        .route("/v1/studies/{id}/export", get(export))
        .route("/v1/devices/{device_id}/pending-tasks", get(poll))
        .route("/v1/uploads", post(upload))
        .route("/v1/internal/results", post(submit_result))
        .route("/v1/objects/{digest}", get(object))
        .route("/v1/queue/claim", post(claim))
        .route("/v1/queue/jobs", get(list_jobs))
        .route("/v1/queue/stats", get(queue_stats))
        .route("/v1/queue/{job_id}/ack", post(ack))
        .route("/v1/admin/clock", get(get_clock).post(set_clock))
        .route("/v1/admin/tick", post(tick))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub service: String,
    pub version: String,
    pub api: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_url: Option<String>,
    pub tick_secs: f64,
    pub virtual_clock: bool,
    pub now: Timestamp,
}

async fn meta(State(s): State<AppState>) -> Json<Meta> {
    Json(Meta {
        service: "hg-ctm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        api: "/v1".into(),
        server_url: s.public_url.clone(),
        tick_secs: s.tick_secs,
        virtual_clock: s.manual_clock.is_some(),
        now: s.service.now(),
    })
}

const PORTAL: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>Health Guardian portal</title></head>
<body><div id="app">The portal bundle is not installed. Configuration is served at <a href="/v1/meta">/v1/meta</a>.</div></body></html>
"#;

async fn portal() -> Html<&'static str> {
    Html(PORTAL)
}

async fn create_study(State(s): State<AppState>, Body(req): Body<CreateStudy>) -> ApiResult<StudyCreated> {
    blocking(&s, move |svc| svc.create_study(&req)).await
}

async fn list_studies(State(s): State<AppState>, Auth(p): Auth) -> ApiResult<Vec<hg_core::model::Study>> {
    blocking(&s, move |svc| svc.list_studies(&p)).await
}

async fn get_study(State(s): State<AppState>, Auth(p): Auth, Path(id): Path<StudyId>) -> ApiResult<hg_core::model::Study> {
    blocking(&s, move |svc| svc.get_study(&p, &id)).await
}

async fn summary(State(s): State<AppState>, Auth(p): Auth, Path(id): Path<StudyId>) -> ApiResult<StudySummary> {
    blocking(&s, move |svc| svc.summary(&p, &id)).await
}

async fn add_subject(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
    Body(req): Body<NewSubject>,
) -> ApiResult<SubjectCreated> {
    blocking(&s, move |svc| svc.add_subject(&p, &id, &req)).await
}

async fn list_subjects(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
) -> ApiResult<Vec<hg_core::model::Subject>> {
    blocking(&s, move |svc| svc.list_subjects(&p, &id)).await
}

#[derive(Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
}

async fn device_token(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path((id, device)): Path<(StudyId, String)>,
) -> ApiResult<TokenResponse> {
    blocking(&s, move |svc| svc.device_token(&p, &id, &device).map(|token| TokenResponse { token })).await
}

async fn define_cohort(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
    Body(req): Body<NewCohort>,
) -> ApiResult<hg_core::model::Cohort> {
    blocking(&s, move |svc| svc.define_cohort(&p, &id, &req)).await
}

async fn list_cohorts(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
) -> ApiResult<Vec<hg_core::model::Cohort>> {
    blocking(&s, move |svc| svc.list_cohorts(&p, &id)).await
}

async fn create_testset(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
    Body(req): Body<NewTestSet>,
) -> ApiResult<hg_core::model::TestSet> {
    blocking(&s, move |svc| svc.create_testset(&p, &id, &req)).await
}

async fn list_testsets(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
) -> ApiResult<Vec<hg_core::model::TestSet>> {
    blocking(&s, move |svc| svc.list_testsets(&p, &id)).await
}

async fn create_task(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
    Body(req): Body<NewTask>,
) -> ApiResult<TaskCreated> {
    blocking(&s, move |svc| svc.create_task(&p, &id, &req)).await
}

async fn list_tasks(State(s): State<AppState>, Auth(p): Auth, Path(id): Path<StudyId>) -> ApiResult<Vec<hg_core::model::Task>> {
    blocking(&s, move |svc| svc.list_tasks(&p, &id)).await
}

#[derive(Debug, Default, Deserialize)]
struct OccurrenceQuery {
    task: Option<TaskId>,
    subject: Option<SubjectId>,
    status: Option<OccurrenceStatus>,
}

async fn list_occurrences(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
    Q(q): Q<OccurrenceQuery>,
) -> ApiResult<Vec<hg_core::model::TaskOccurrence>> {
    let f = OccurrenceFilter { task_id: q.task, subject_id: q.subject, status: q.status };
    blocking(&s, move |svc| svc.list_occurrences(&p, &id, &f)).await
}

async fn create_rule(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
    Body(req): Body<NewRule>,
) -> ApiResult<hg_core::model::Rule> {
    blocking(&s, move |svc| svc.create_rule(&p, &id, &req)).await
}

async fn list_rules(State(s): State<AppState>, Auth(p): Auth, Path(id): Path<StudyId>) -> ApiResult<Vec<hg_core::model::Rule>> {
    blocking(&s, move |svc| svc.list_rules(&p, &id)).await
}

#[derive(Debug, Default, Deserialize)]
struct EvaluateQuery {
    day: Option<NaiveDate>,
}

async fn evaluate_rule(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path((id, rid)): Path<(StudyId, RuleId)>,
    Q(q): Q<EvaluateQuery>,
) -> ApiResult<RuleEvaluation> {
    blocking(&s, move |svc| svc.evaluate_rule_now(&p, &id, &rid, q.day)).await
}

async fn rule_runs(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path((id, rid)): Path<(StudyId, RuleId)>,
) -> ApiResult<Vec<hg_store::RuleRun>> {
    blocking(&s, move |svc| svc.rule_runs(&p, &id, &rid)).await
}

async fn list_results(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(id): Path<StudyId>,
    Q(q): Q<ResultQuery>,
) -> ApiResult<Vec<hg_core::model::AnalyticResult>> {
    blocking(&s, move |svc| svc.list_results(&p, &id, &q)).await
}

async fn export(State(s): State<AppState>, Auth(p): Auth, Path(id): Path<StudyId>) -> ApiResult<ExportBundle> {
    blocking(&s, move |svc| svc.export(&p, &id)).await
}

#[derive(Debug, Default, Deserialize)]
struct PollQuery {
    now: Option<Timestamp>,
}

async fn poll(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(device): Path<String>,
    Q(q): Q<PollQuery>,
) -> ApiResult<Vec<OccurrenceDescriptor>> {
    blocking(&s, move |svc| svc.poll_tasks(&p, &device, q.now)).await
}

async fn upload(State(s): State<AppState>, Auth(p): Auth, body: axum::body::Bytes) -> ApiResult<hg_store::Ingested> {
    blocking(&s, move |svc| {
        let env = UploadEnvelope::parse(&body)?;
        svc.upload(&p, &env)
    })
    .await
}

async fn submit_result(
    State(s): State<AppState>,
    Auth(p): Auth,
    Body(req): Body<SubmitResult>,
) -> ApiResult<hg_core::model::AnalyticResult> {
    blocking(&s, move |svc| svc.submit_result(&p, &req)).await
}

async fn object(State(s): State<AppState>, Auth(p): Auth, Path(digest): Path<String>) -> std::result::Result<Response, ApiError> {
    let svc = Arc::clone(&s.service);
    let bytes = tokio::task::spawn_blocking(move || svc.object(&p, &digest))
        .await
        .map_err(|e| ApiError(HgError::internal(e)))??;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn claim(
    State(s): State<AppState>,
    Auth(p): Auth,
    Body(req): Body<ClaimRequest>,
) -> ApiResult<Option<ClaimedJob>> {
    blocking(&s, move |svc| svc.claim(&p, &req)).await
}

async fn ack(
    State(s): State<AppState>,
    Auth(p): Auth,
    Path(job): Path<JobId>,
    Body(req): Body<AckRequest>,
) -> ApiResult<hg_store::Job> {
    blocking(&s, move |svc| svc.ack(&p, &job, &req)).await
}

#[derive(Debug, Default, Deserialize)]
struct JobQuery {
    state: Option<JobState>,
    kind: Option<String>,
}

async fn list_jobs(State(s): State<AppState>, Auth(p): Auth, Q(q): Q<JobQuery>) -> ApiResult<Vec<hg_store::Job>> {
    blocking(&s, move |svc| svc.list_jobs(&p, q.state, q.kind.as_deref())).await
}

async fn queue_stats(State(s): State<AppState>, Auth(p): Auth) -> ApiResult<hg_store::QueueStats> {
    blocking(&s, move |svc| svc.queue_stats(&p)).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClockBody {
    pub now: Timestamp,
}

fn admin(s: &AppState, p: &Principal) -> std::result::Result<ManualClock, ApiError> {
    if *p != Principal::Worker {
        return Err(ApiError(HgError::forbidden("operator credential required")));
    }
    s.manual_clock
        .clone()
        .ok_or_else(|| ApiError(HgError::not_found("admin clock endpoints exist only in test mode")))
}

async fn get_clock(State(s): State<AppState>, Auth(p): Auth) -> ApiResult<ClockBody> {
    admin(&s, &p)?;
    Ok(Json(ClockBody { now: s.service.now() }))
}

async fn set_clock(State(s): State<AppState>, Auth(p): Auth, Body(req): Body<ClockBody>) -> ApiResult<ClockBody> {
    let clock = admin(&s, &p)?;
    if req.now < s.service.now() {
        return Err(ApiError(HgError::validation("the virtual clock only moves forward")));
    }
    clock.set(req.now);
    Ok(Json(ClockBody { now: s.service.now() }))
}

#[derive(Debug, Default, Deserialize)]
struct TickQuery {
    #[serde(default)]
    flush: bool,
}

async fn tick(State(s): State<AppState>, Auth(p): Auth, Q(q): Q<TickQuery>) -> ApiResult<TickReport> {
    admin(&s, &p)?;
    blocking(&s, move |svc| svc.tick(q.flush)).await
}
