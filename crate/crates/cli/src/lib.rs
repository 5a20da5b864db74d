//! The `hg` operator command line.
//!
//! Exit codes: 0 ok, 1 usage, 2 infrastructure (unreachable server, busy
//! port, I/O), 3 rejected request (validation, permissions, conflicts).

pub mod export;
pub mod manifest;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{Days, NaiveDate};
use clap::{Args, Parser, Subcommand};
use hg_analytics::tug::{Forest, ForestParams, TugModel};
use hg_core::model::TestKind;
use hg_core::{ErrorCode, HgError, StudyId, TimeOfDay, Timestamp};
use hg_ctm::{Client, ServeConfig};
use hg_store::JobState;
use hg_worker::{Analytic, HttpBackend, RunOptions, TugAnalytic, WorkerDescriptor, run_worker, standard_analytic};
use serde::Serialize;
use serde_json::json;
use tokio::sync::watch;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "hg", version, about = "Run, drive and inspect a study platform")]
pub struct Cli {
    /// Base URL of the service.
    #[arg(long, global = true, env = "HG_SERVER", default_value = DEFAULT_SERVER)]
    pub server: String,
    /// Bearer token: researcher, device or worker.
    #[arg(long, global = true, env = "HG_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the service, store, queue and scheduler in one process.
    Serve(ServeArgs),
    /// Run an analytic worker against the service.
    Worker(WorkerArgs),
    /// Drive a simulated device fleet through virtual days.
    Sim(SimArgs),
    /// Author studies from a manifest.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Write results.csv, datapoints.jsonl and vault.csv for a study.
    Export(ExportArgs),
    /// Inspect the job queue.
    #[command(subcommand)]
    Queue(QueueCommand),
    /// Convert a `t,shoulder_y,hip_y` CSV into a pose2d/v1 document.
    PoseCsv(PoseCsvArgs),
    /// Train a TUG forest on simulated walks and write the model file.
    TugTrain(TugTrainArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub db_path: Option<PathBuf>,
    #[arg(long)]
    pub object_dir: Option<PathBuf>,
    /// Scheduler period in seconds; 0 disables it.
    #[arg(long)]
    pub tick_secs: Option<f64>,
    #[arg(long, env = "HG_WORKER_TOKEN", hide_env_values = true)]
    pub worker_token: Option<String>,
    /// Run on a virtual clock and expose the admin clock and tick endpoints.
    #[arg(long)]
    pub test_mode: bool,
    /// Start of the virtual clock; implies --test-mode. Defaults to now.
    #[arg(long)]
    pub virtual_start: Option<Timestamp>,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// phq8, tug or sts.
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 60.0)]
    pub lease_secs: f64,
    /// TUG model file; the built-in linear model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Exit once the queue has nothing for this kind.
    #[arg(long)]
    pub exit_when_idle: bool,
    /// Seconds in-flight jobs may take to finish after a shutdown signal.
    #[arg(long, default_value_t = 30.0)]
    pub grace_secs: f64,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 3)]
    pub days: u32,
    #[arg(long, default_value_t = 1.0)]
    pub compliance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the ground truth log (JSON lines) here.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub study_name: Option<String>,
    /// Add a TUG test-set and a rule assigning it when total_score < threshold.
    #[arg(long)]
    pub with_rule: bool,
    #[arg(long, default_value_t = 10.0)]
    pub threshold: f64,
    /// Add a daily sit-to-stand test-set.
    #[arg(long)]
    pub with_sts: bool,
    /// First virtual day; defaults to the server clock's day.
    #[arg(long)]
    pub start: Option<NaiveDate>,
    #[arg(long, default_value = "12:00")]
    pub poll_at: TimeOfDay,
    #[arg(long, default_value_t = 32)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 0.7)]
    pub sigma: f64,
    #[arg(long, default_value_t = 60.0)]
    pub settle_timeout_secs: f64,
    /// Do not run workers in this process; something else must drain the
    /// queue.
    #[arg(long)]
    pub external_workers: bool,
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Create or match every entity a manifest names.
    Apply {
        file: PathBuf,
    },
    /// Parse and validate a manifest without contacting the server.
    Check {
        file: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub study: String,
    #[arg(long, default_value = "export")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum QueueCommand {
    Inspect {
        /// ready, leased, done or dead.
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long, default_value_t = 50)]
        limit: usize,
    },
}

#[derive(Debug, Args)]
pub struct PoseCsvArgs {
    pub input: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// Output file; stdout otherwise.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TugTrainArgs {
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of episodes held out for the reported error.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[arg(long, default_value = "tug-forest.json")]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Hg(HgError),
}

impl From<HgError> for CliError {
    fn from(e: HgError) -> Self {
        CliError::Hg(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Hg(e) => write!(f, "{}: {}", e.code.as_str(), e.message),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Hg(e) if matches!(e.code, ErrorCode::Unavailable | ErrorCode::Internal) => 2,
            CliError::Hg(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// What a command prints: JSON under `--json`, text otherwise.
pub struct Output {
    pub json: serde_json::Value,
    pub text: String,
}

impl Output {
    fn new(value: &impl Serialize, text: impl Into<String>) -> Self {
        Self { json: serde_json::to_value(value).expect("output serializes"), text: text.into() }
    }

    pub fn render(&self, json: bool) -> String {
        if json {
            serde_json::to_string_pretty(&self.json).expect("json value")
        } else {
            self.text.clone()
        }
    }
}

fn read(path: &std::path::Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write(path: &std::path::Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes)
        .map_err(|e| HgError::new(ErrorCode::Unavailable, format!("{}: {e}", path.display())).into())
}

fn client(cli: &Cli) -> CliResult<Client> {
    let c = Client::new(&cli.server)?;
    Ok(match &cli.token {
        Some(t) => c.with_token(t),
        None => c,
    })
}

fn need_token(cli: &Cli, what: &str) -> CliResult<String> {
    cli.token.clone().ok_or_else(|| CliError::Usage(format!("{what} needs --token (or HG_TOKEN)")))
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

pub async fn run(cli: Cli) -> CliResult<Output> {
    match &cli.command {
        Command::Serve(a) => serve(&cli, a).await,
        Command::Worker(a) => worker(&cli, a).await,
        Command::Sim(a) => sim(&cli, a).await,
        Command::Study(StudyCommand::Apply { file }) => {
            let src = read(file)?;
            let m = manifest::Manifest::parse(&src)?;
            let rep = manifest::apply(&client(&cli)?, &m).await?;
            let mut text = String::new();
            if let Some(s) = &rep.study {
                text += &format!("study    {:<24} {} {}\n", s.name, s.id, verb(s.created));
            }
            for (what, list) in [
                ("subject", &rep.subjects),
                ("cohort", &rep.cohorts),
                ("testset", &rep.testsets),
                ("task", &rep.tasks),
                ("rule", &rep.rules),
            ] {
                for a in list {
                    text += &format!("{what:<8} {:<24} {} {}\n", a.name, a.id, verb(a.created));
                }
            }
            if let Some(t) = &rep.researcher_token {
                text += &format!("researcher token: {t}\n");
            }
            for (raw, t) in &rep.device_tokens {
                text += &format!("device token for {raw}: {t}\n");
            }
            for d in &rep.drift {
                text += &format!("warning: {d}\n");
            }
            text += &format!("{} created", rep.created);
            Ok(Output::new(&rep, text))
        }
        Command::Study(StudyCommand::Check { file }) => {
            let m = manifest::Manifest::parse(&read(file)?)?;
            let counts = json!({
                "study": m.study,
                "subjects": m.subjects.len(),
                "cohorts": m.cohorts.len(),
                "testsets": m.testsets.len(),
                "tasks": m.tasks.len(),
                "rules": m.rules.len(),
            });
            let text = format!(
                "{}: {} subjects, {} cohorts, {} test-sets, {} tasks, {} rules",
                m.study,
                m.subjects.len(),
                m.cohorts.len(),
                m.testsets.len(),
                m.tasks.len(),
                m.rules.len()
            );
            Ok(Output::new(&counts, text))
        }
        Command::Export(a) => {
            need_token(&cli, "export")?;
            let bundle = client(&cli)?.export(&StudyId::from(a.study.clone())).await?;
            let w = export::write_all(&a.out, &bundle)?;
            let text = format!(
                "wrote {} results, {} datapoints, {} vault rows to {}",
                w.results,
                w.datapoints,
                w.vault,
                w.dir.display()
            );
            Ok(Output::new(&w, text))
        }
        Command::Queue(QueueCommand::Inspect { state, kind, limit }) => {
            let state = state
                .as_deref()
                .map(|s| {
                    JobState::ALL
                        .into_iter()
                        .find(|j| j.as_str() == s)
                        .ok_or_else(|| CliError::Usage(format!("unknown job state {s:?}")))
                })
                .transpose()?;
            let c = client(&cli)?;
            let stats = c.queue_stats().await?;
            let mut jobs = c.list_jobs(state, kind.as_deref()).await?;
            jobs.truncate(*limit);
            let mut text = format!(
                "enqueued {}  ready {}  leased {}  done {}  dead {}\n",
                stats.enqueued, stats.ready, stats.leased, stats.done, stats.dead
            );
            for j in &jobs {
                text += &format!(
                    "{}  {:<6} {:<5} attempts={} enqueued={}{}\n",
                    j.job_id,
                    j.state.as_str(),
                    j.worker_kind,
                    j.attempts,
                    j.enqueued_at,
                    j.last_error.as_ref().map(|e| format!(" error={e}")).unwrap_or_default()
                );
            }
            Ok(Output::new(&json!({"stats": stats, "jobs": jobs}), text.trim_end()))
        }
        Command::PoseCsv(a) => {
            let doc = hg_core::payload::pose_from_csv(&read(&a.input)?, a.fps)?;
            let body = serde_json::to_string(&doc).map_err(HgError::internal)?;
            match &a.out {
                Some(p) => {
                    write(p, &body)?;
                    let summary = json!({"frames": doc.frames.len(), "out": p});
                    Ok(Output::new(&summary, format!("wrote {} frames to {}", doc.frames.len(), p.display())))
                }
                None => Ok(Output { json: serde_json::to_value(&doc).map_err(HgError::internal)?, text: body }),
            }
        }
        Command::TugTrain(a) => tug_train(a),
    }
}

fn verb(created: bool) -> &'static str {
    if created { "created" } else { "exists" }
}

async fn serve(cli: &Cli, a: &ServeArgs) -> CliResult<Output> {
    let mut cfg = ServeConfig::default().with_env()?;
    if let Some(h) = &a.host {
        cfg.host = h.clone();
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if a.db_path.is_some() {
        cfg.db_path = a.db_path.clone();
    }
    if a.object_dir.is_some() {
        cfg.object_dir = a.object_dir.clone();
    }
    if let Some(t) = a.tick_secs {
        cfg.tick_secs = t;
    }
    if a.worker_token.is_some() {
        cfg.worker_token = a.worker_token.clone();
    }
    if a.test_mode || a.virtual_start.is_some() {
        cfg.virtual_start = Some(a.virtual_start.unwrap_or_else(|| Timestamp::from_datetime(chrono::Utc::now())));
    }
    let token_file = cfg.data_dir.join("worker_token");
    let srv = hg_ctm::start(cfg.clone()).await?;
    let started = json!({
        "event": "listening",
        "url": srv.url(),
        "data_dir": cfg.data_dir,
        "test_mode": cfg.virtual_start.is_some(),
    });
    let line = if cli.json {
        started.to_string()
    } else {
        let token_note = if cfg.worker_token.is_some() {
            String::new()
        } else {
            format!(" (worker token in {})", token_file.display())
        };
        format!("listening on {}{token_note}", srv.url())
    };
    {
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }
    shutdown_signal().await;
    tracing::info!("shutting down");
    srv.shutdown().await?;
    Ok(Output::new(&json!({"event": "stopped"}), "stopped"))
}

fn analytic_for(kind: TestKind, model: Option<&PathBuf>) -> CliResult<Arc<dyn Analytic>> {
    Ok(match (kind, model) {
        (TestKind::Tug, Some(path)) => Arc::new(TugAnalytic::with_model_file(path).map_err(HgError::from)?),
        (_, Some(_)) => return Err(CliError::Usage("--model applies to --kind tug only".into())),
        (k, None) => Arc::from(standard_analytic(k)),
    })
}

async fn worker(cli: &Cli, a: &WorkerArgs) -> CliResult<Output> {
    let token = cli
        .token
        .clone()
        .or_else(|| std::env::var("HG_WORKER_TOKEN").ok())
        .ok_or_else(|| CliError::Usage("worker needs --token, HG_TOKEN or HG_WORKER_TOKEN".into()))?;
    let d = WorkerDescriptor::standard(&a.kind, a.concurrency).map_err(|e| CliError::Usage(e.message))?;
    let kind = TestKind::from_worker_kind(&a.kind).expect("descriptor validated the kind");
    let analytic = analytic_for(kind, a.model.as_ref())?;
    let backend = Arc::new(HttpBackend::new(&cli.server, &token)?);
    let opts = RunOptions {
        lease_secs: a.lease_secs,
        grace: Duration::from_secs_f64(a.grace_secs.max(0.0)),
        exit_when_idle: a.exit_when_idle,
        ..Default::default()
    };
    let (stop, rx) = watch::channel(false);
    let signal = tokio::spawn(async move {
        shutdown_signal().await;
        let _ = stop.send(true);
    });
    let report = run_worker(backend, &d, analytic, opts, rx).await;
    signal.abort();
    let report = report?;
    let text = format!(
        "{}: processed {} failed {} results {} stale {} infra errors {} abandoned {}",
        a.kind, report.processed, report.failed, report.results, report.stale, report.infra_errors, report.abandoned
    );
    Ok(Output::new(&report, text))
}

async fn sim(cli: &Cli, a: &SimArgs) -> CliResult<Output> {
    let token = need_token(cli, "sim (operator token)")?;
    if a.days == 0 || a.subjects == 0 {
        return Err(CliError::Usage("--days and --subjects must be at least 1".into()));
    }
    let c = Client::new(&cli.server)?;
    let ops = c.with_token(&token);
    let now = ops.clock().await?;
    let start = a.start.unwrap_or_else(|| {
        if TimeOfDay::of(now) <= a.poll_at { now.date() } else { now.date() + Days::new(1) }
    });
    let scenario = hg_sim::Scenario {
        study_name: a.study_name.clone().unwrap_or_else(|| format!("sim-{}-{}", a.seed, now.millis())),
        subjects: a.subjects,
        compliance: a.compliance,
        seed: a.seed,
        with_rule: a.with_rule,
        threshold: a.threshold,
        with_sts: a.with_sts,
        start_date: Some(start),
        end_date: Some(start + Days::new(a.days as u64 - 1)),
    };
    let opts = hg_sim::FleetOptions {
        days: a.days,
        start,
        poll_at: a.poll_at,
        max_in_flight: a.max_in_flight,
        settle_timeout: Duration::from_secs_f64(a.settle_timeout_secs),
        sigma: a.sigma,
        ..Default::default()
    };
    let (stop, rx) = watch::channel(false);
    let mut workers = tokio::task::JoinSet::new();
    if !a.external_workers {
        for kind in TestKind::ALL {
            let backend = Arc::new(HttpBackend::new(&cli.server, &token)?);
            let d = WorkerDescriptor::standard(kind.worker_kind(), 2)?;
            let analytic: Arc<dyn Analytic> = Arc::from(standard_analytic(kind));
            let rx = rx.clone();
            let opts = RunOptions { idle_poll: Duration::from_millis(20), ..Default::default() };
            workers.spawn(async move { run_worker(backend, &d, analytic, opts, rx).await });
        }
    }
    let began = Instant::now();
    let outcome = async {
        let plan = hg_sim::setup_study(&c, &scenario).await?;
        hg_sim::run_fleet(&c, &token, &plan, &opts).await
    }
    .await;
    let _ = stop.send(true);
    while let Some(r) = workers.join_next().await {
        if let Ok(Err(e)) = r {
            tracing::warn!(error = %e, "in-process worker stopped");
        }
    }
    let outcome = outcome?;
    let report_json = serde_json::to_string_pretty(&outcome.report).map_err(HgError::internal)?;
    if let Some(p) = &a.report {
        write(p, format!("{report_json}\n"))?;
    }
    if let Some(p) = &a.truth {
        write(p, outcome.truth.to_jsonl())?;
    }
    let r = &outcome.report;
    let text = format!(
        "{} subjects x {} days: offered {} completed {} skipped {} missed {}; server holds {} datapoints, {} results; \
         reconciliation {} ({:.1} s)",
        r.subjects,
        r.days,
        r.offered,
        r.completed,
        r.skipped,
        r.missed,
        r.server.datapoints,
        r.server.results,
        if r.reconciliation.is_clean() { "clean" } else { "FAILED" },
        began.elapsed().as_secs_f64()
    );
    if !r.reconciliation.is_clean() {
        return Err(HgError::validation(format!("{text}\n{:?}", r.reconciliation)).into());
    }
    Ok(Output::new(&outcome.report, text))
}

#[derive(Serialize)]
struct Trained {
    model_id: String,
    episodes: usize,
    train: usize,
    holdout: usize,
    holdout_mae: f64,
    out: PathBuf,
}

fn tug_train(a: &TugTrainArgs) -> CliResult<Output> {
    if !(0.0..1.0).contains(&a.holdout) || a.episodes < 10 {
        return Err(CliError::Usage("need --episodes >= 10 and 0 <= --holdout < 1".into()));
    }
    let corpus = hg_sim::tug_corpus(a.episodes, a.seed);
    let cut = a.episodes - (a.episodes as f64 * a.holdout).round() as usize;
    let (train, test) = corpus.split_at(cut);
    let x: Vec<_> = train.iter().map(|(f, _)| *f).collect();
    let y: Vec<_> = train.iter().map(|(_, l)| *l).collect();
    let forest = Forest::fit(&x, &y, ForestParams::default(), a.seed).map_err(HgError::from)?;
    let model_id = format!("tug-forest-s{}-n{}", a.seed, train.len());
    let model = TugModel::forest(model_id.clone(), forest, a.seed);
    let mae = if test.is_empty() {
        f64::NAN
    } else {
        test.iter().map(|(f, l)| (model.raw_predict_array(f) - l).abs()).sum::<f64>() / test.len() as f64
    };
    model
        .save(&a.out)
        .map_err(|e| HgError::new(ErrorCode::Unavailable, format!("{}: {e}", a.out.display())))?;
    let t = Trained {
        model_id,
        episodes: a.episodes,
        train: train.len(),
        holdout: test.len(),
        holdout_mae: mae,
        out: a.out.clone(),
    };
    let text = format!("{}: held-out MAE {:.3} s over {} episodes, wrote {}", t.model_id, mae, t.holdout, a.out.display());
    Ok(Output::new(&t, text))
}
