use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use hg_core::model::{Payload, TestKind};
use hg_core::{ErrorCode, HgError, Result};
use hg_ctm::{AckRequest, ClaimedJob, SubmitResult};
use hg_store::Outcome;
use serde::Serialize;
use tokio::sync::watch;
use tokio::task::JoinSet;
use tokio::time::Instant;
use tracing::{debug, info, warn};

use crate::analytic::{Analytic, Item, JobInput};
use crate::backend::Backend;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkerDescriptor {
    pub worker_kind: String,
    pub accepts: String,
    pub result_schema: String,
    pub concurrency: usize,
}

impl WorkerDescriptor {
    /// Descriptor of one of the shipped workers: `phq8`, `tug` or `sts`.
    pub fn standard(worker_kind: &str, concurrency: usize) -> Result<Self> {
        let kind = TestKind::from_worker_kind(worker_kind)
            .ok_or_else(|| HgError::validation(format!("unknown worker kind {worker_kind:?}")))?;
        let result_schema = match kind {
            TestKind::Phq8 => hg_analytics::phq8::RESULT_SCHEMA,
            TestKind::Tug => hg_analytics::tug::RESULT_SCHEMA,
            TestKind::SitToStand => hg_analytics::sts::RESULT_SCHEMA,
        };
        Ok(Self {
            worker_kind: worker_kind.to_owned(),
            accepts: kind.payload_schema().to_owned(),
            result_schema: result_schema.to_owned(),
            concurrency,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub lease_secs: f64,
    /// Sleep between claims when the queue is empty.
    pub idle_poll: Duration,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    /// How long in-flight jobs may run after shutdown is requested.
    pub grace: Duration,
    /// Stop as soon as a claim finds the queue empty.
    pub exit_when_idle: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            lease_secs: 60.0,
            idle_poll: Duration::from_secs(1),
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(30),
            grace: Duration::from_secs(30),
            exit_when_idle: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunReport {
    /// Jobs acked as successful.
    pub processed: u64,
    /// Jobs acked as failed by an analytic error.
    pub failed: u64,
    pub results: u64,
    /// Acks rejected because the lease had already moved on.
    pub stale: u64,
    pub infra_errors: u64,
    /// Jobs dropped at shutdown without an ack; their leases will expire.
    pub abandoned: u64,
}

#[derive(Default)]
struct Counters {
    processed: AtomicU64,
    failed: AtomicU64,
    results: AtomicU64,
    stale: AtomicU64,
    infra_errors: AtomicU64,
    abandoned: AtomicU64,
}

impl Counters {
    fn report(&self) -> RunReport {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        RunReport {
            processed: g(&self.processed),
            failed: g(&self.failed),
            results: g(&self.results),
            stale: g(&self.stale),
            infra_errors: g(&self.infra_errors),
            abandoned: g(&self.abandoned),
        }
    }
}

fn bump(a: &AtomicU64) {
    a.fetch_add(1, Ordering::Relaxed);
}

/// Exponential backoff, doubling from `base` up to `cap`.
#[derive(Debug, Clone)]
pub struct Backoff {
    base: Duration,
    cap: Duration,
    failures: u32,
}

impl Backoff {
    pub fn new(base: Duration, cap: Duration) -> Self {
        Self { base, cap, failures: 0 }
    }

    pub fn next_delay(&mut self) -> Duration {
        let factor = 2u32.saturating_pow(self.failures.min(20));
        self.failures = self.failures.saturating_add(1);
        self.base.saturating_mul(factor).min(self.cap)
    }

    pub fn reset(&mut self) {
        self.failures = 0;
    }
}

fn is_infra(e: &HgError) -> bool {
    matches!(e.code, ErrorCode::Unavailable | ErrorCode::Internal)
}

struct Loop {
    backend: Arc<dyn Backend>,
    analytic: Arc<dyn Analytic>,
    kind: String,
    opts: RunOptions,
    shutdown: watch::Receiver<bool>,
    counters: Arc<Counters>,
    backoff: Backoff,
}

/// Outcome of a retried step: done, or given up because of shutdown.
enum Step<T> {
    Done(T),
    Stopped,
}

impl Loop {
    fn stopping(&self) -> bool {
        *self.shutdown.borrow()
    }

    /// Sleeps unless shutdown arrives first.
    async fn pause(&mut self, d: Duration) {
        let mut rx = self.shutdown.clone();
        tokio::select! {
            _ = tokio::time::sleep(d) => {}
            _ = rx.wait_for(|s| *s) => {}
        }
    }

    /// Retries infrastructure errors with backoff until shutdown.
    async fn retry<T, F, Fut>(&mut self, mut op: F) -> Result<Step<T>>
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T>>,
    {
        loop {
            match op().await {
                Ok(v) => {
                    self.backoff.reset();
                    return Ok(Step::Done(v));
                }
                Err(e) if is_infra(&e) => {
                    bump(&self.counters.infra_errors);
                    let d = self.backoff.next_delay();
                    warn!(error = %e, delay_ms = d.as_millis() as u64, "backend unavailable, retrying");
                    if self.stopping() {
                        return Ok(Step::Stopped);
                    }
                    self.pause(d).await;
                    if self.stopping() {
                        return Ok(Step::Stopped);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn run(mut self) -> Result<()> {
        while !self.stopping() {
            let backend = Arc::clone(&self.backend);
            let (kind, lease) = (self.kind.clone(), self.opts.lease_secs);
            let claimed = match self.retry(|| backend.claim(&kind, lease)).await? {
                Step::Done(c) => c,
                Step::Stopped => break,
            };
            match claimed {
                Some(job) => self.process(job).await?,
                None if self.opts.exit_when_idle => break,
                None => self.pause(self.opts.idle_poll).await,
            }
        }
        Ok(())
    }

    async fn load(&mut self, claimed: &ClaimedJob) -> Result<Step<std::result::Result<Vec<Item>, HgError>>> {
        let mut items = Vec::with_capacity(claimed.datapoints.len());
        for dp in &claimed.datapoints {
            let bytes = match &dp.payload {
                Payload::Text { text } => text.clone().into_bytes(),
                Payload::Scalar { value } => value.to_string().into_bytes(),
                Payload::File { object } => {
                    let backend = Arc::clone(&self.backend);
                    let digest = object.sha256.clone();
                    match self.retry(|| backend.object(&digest)).await {
                        Ok(Step::Done(b)) => b,
                        Ok(Step::Stopped) => return Ok(Step::Stopped),
                        Err(e) if matches!(e.code, ErrorCode::Corrupt | ErrorCode::NotFound) => {
                            return Ok(Step::Done(Err(e)));
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            items.push(Item {
                datapoint: dp.clone(),
                bytes,
            });
        }
        Ok(Step::Done(Ok(items)))
    }

    async fn process(&mut self, claimed: ClaimedJob) -> Result<()> {
        let job_id = claimed.job.job_id.clone();
        let attempts = claimed.job.attempts;
        debug!(job = %job_id, attempts, "claimed");
        let items = match self.load(&claimed).await? {
            Step::Done(r) => r,
            Step::Stopped => {
                bump(&self.counters.abandoned);
                return Ok(());
            }
        };
        let outcome = match items {
            Err(e) => Err(format!("{}: {}", e.code.as_str(), e.message)),
            Ok(items) => {
                let input = JobInput {
                    job: claimed.job.clone(),
                    dataset: claimed.dataset.clone(),
                    items,
                };
                let analytic = Arc::clone(&self.analytic);
                let ran = tokio::task::spawn_blocking(move || analytic.run(&input))
                    .await
                    .map_err(HgError::internal)?;
                ran.map_err(|e| format!("{}: {e}", e.code().as_str()))
            }
        };
        let outcome = match outcome {
            Ok(docs) => {
                for doc in docs {
                    let req = SubmitResult {
                        datapoint_id: doc.datapoint_id,
                        dataset_id: Some(claimed.dataset.dataset_id.clone()),
                        worker_kind: self.kind.clone(),
                        schema_version: 1,
                        body: doc.body,
                    };
                    let backend = Arc::clone(&self.backend);
                    match self.retry(|| backend.submit(&req)).await? {
                        Step::Done(_) => bump(&self.counters.results),
                        Step::Stopped => {
                            bump(&self.counters.abandoned);
                            return Ok(());
                        }
                    }
                }
                Outcome::Success
            }
            Err(reason) => {
                warn!(job = %job_id, %reason, "analytic failed");
                Outcome::Failure { reason }
            }
        };
        let success = outcome == Outcome::Success;
        let req = AckRequest {
            outcome,
            lease_attempts: attempts,
        };
        let backend = Arc::clone(&self.backend);
        match self.retry(|| backend.ack(&job_id, &req)).await {
            Ok(Step::Done(job)) => {
                debug!(job = %job_id, state = job.state.as_str(), "acked");
                bump(if success { &self.counters.processed } else { &self.counters.failed });
            }
            Ok(Step::Stopped) => bump(&self.counters.abandoned),
            Err(e) if e.code == ErrorCode::StaleLease => {
                info!(job = %job_id, "lease expired before ack");
                bump(&self.counters.stale);
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }
}

/// Runs `descriptor.concurrency` claim loops until `shutdown` turns true,
/// then lets in-flight jobs finish within the grace period.
///
/// Infrastructure errors are retried with backoff. Any other backend error,
/// such as a rejected credential, stops the worker.
pub async fn run_worker(
    backend: Arc<dyn Backend>,
    descriptor: &WorkerDescriptor,
    analytic: Arc<dyn Analytic>,
    opts: RunOptions,
    shutdown: watch::Receiver<bool>,
) -> Result<RunReport> {
    if descriptor.concurrency == 0 {
        return Err(HgError::validation("concurrency must be at least 1"));
    }
    if !(opts.lease_secs.is_finite() && opts.lease_secs > 0.0) {
        return Err(HgError::validation("lease_secs must be > 0"));
    }
    let counters = Arc::new(Counters::default());
    let mut set = JoinSet::new();
    for _ in 0..descriptor.concurrency {
        let l = Loop {
            backend: Arc::clone(&backend),
            analytic: Arc::clone(&analytic),
            kind: descriptor.worker_kind.clone(),
            opts: opts.clone(),
            shutdown: shutdown.clone(),
            counters: Arc::clone(&counters),
            backoff: Backoff::new(opts.backoff_base, opts.backoff_cap),
        };
        set.spawn(l.run());
    }
    let mut rx = shutdown.clone();
    let mut deadline: Option<Instant> = None;
    loop {
        tokio::select! {
            joined = set.join_next() => match joined {
                None => break,
                Some(Ok(Ok(()))) => {}
                Some(Ok(Err(e))) => {
                    set.abort_all();
                    return Err(e);
                }
                Some(Err(e)) => {
                    set.abort_all();
                    return Err(HgError::internal(e));
                }
            },
            _ = rx.wait_for(|s| *s), if deadline.is_none() => {
                deadline = Some(Instant::now() + opts.grace);
            }
            _ = tokio::time::sleep_until(deadline.unwrap_or_else(Instant::now)), if deadline.is_some() => {
                let left = set.len() as u64;
                warn!(in_flight = left, "grace period over, abandoning jobs");
                counters.abandoned.fetch_add(left, Ordering::Relaxed);
                set.abort_all();
                break;
            }
        }
    }
    Ok(counters.report())
}
