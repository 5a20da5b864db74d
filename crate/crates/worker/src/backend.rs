use std::sync::Arc;

use async_trait::async_trait;
use hg_core::model::AnalyticResult;
use hg_core::{HgError, JobId, Result};
use hg_ctm::{AckRequest, ClaimRequest, ClaimedJob, Client, Principal, Service, SubmitResult};
use hg_store::Job;

/// The worker's view of the task manager: the queue, objects and result
/// submission.
#[async_trait]
pub trait Backend: Send + Sync {
    async fn claim(&self, worker_kind: &str, lease_secs: f64) -> Result<Option<ClaimedJob>>;
    async fn object(&self, digest: &str) -> Result<Vec<u8>>;
    async fn submit(&self, req: &SubmitResult) -> Result<AnalyticResult>;
    async fn ack(&self, job: &JobId, req: &AckRequest) -> Result<Job>;
}

/// Calls the service directly with worker privileges.
#[derive(Clone)]
pub struct InProcess {
    svc: Arc<Service>,
}

impl InProcess {
    pub fn new(svc: Arc<Service>) -> Self {
        Self { svc }
    }

    async fn call<T, F>(&self, f: F) -> Result<T>
    where
        T: Send + 'static,
        F: FnOnce(&Service, &Principal) -> Result<T> + Send + 'static,
    {
        let svc = Arc::clone(&self.svc);
        tokio::task::spawn_blocking(move || f(&svc, &Principal::Worker))
            .await
            .map_err(HgError::internal)?
    }
}

#[async_trait]
impl Backend for InProcess {
    async fn claim(&self, worker_kind: &str, lease_secs: f64) -> Result<Option<ClaimedJob>> {
        let req = ClaimRequest {
            worker_kind: worker_kind.to_owned(),
            lease_secs: Some(lease_secs),
        };
        self.call(move |s, p| s.claim(p, &req)).await
    }

    async fn object(&self, digest: &str) -> Result<Vec<u8>> {
        let digest = digest.to_owned();
        self.call(move |s, p| s.object(p, &digest)).await
    }

    async fn submit(&self, req: &SubmitResult) -> Result<AnalyticResult> {
        let req = req.clone();
        self.call(move |s, p| s.submit_result(p, &req)).await
    }

    async fn ack(&self, job: &JobId, req: &AckRequest) -> Result<Job> {
        let (job, req) = (job.clone(), req.clone());
        self.call(move |s, p| s.ack(p, &job, &req)).await
    }
}

/// Speaks the `/v1` HTTP API with a bearer token.
#[derive(Clone)]
pub struct HttpBackend {
    client: Client,
}

impl HttpBackend {
    pub fn new(base_url: &str, token: &str) -> Result<Self> {
        Ok(Self {
            client: Client::new(base_url)?.with_token(token),
        })
    }
}

#[async_trait]
impl Backend for HttpBackend {
    async fn claim(&self, worker_kind: &str, lease_secs: f64) -> Result<Option<ClaimedJob>> {
        self.client.claim(worker_kind, Some(lease_secs)).await
    }

    async fn object(&self, digest: &str) -> Result<Vec<u8>> {
        self.client.object(digest).await
    }

    async fn submit(&self, req: &SubmitResult) -> Result<AnalyticResult> {
        self.client.submit_result(req).await
    }

    async fn ack(&self, job: &JobId, req: &AckRequest) -> Result<Job> {
        self.client.ack(job, req).await
    }
}
