//! Process wiring: store, scheduler loop and HTTP listener.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use hg_core::{Clock, ErrorCode, HgError, ManualClock, Result, SystemClock, Timestamp};
use hg_store::{FsObjectStore, ObjectStore, QueueConfig, Store};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::http::{AppState, router};
use crate::service::Service;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub db_path: Option<PathBuf>,
    pub object_dir: Option<PathBuf>,
    /// Scheduler period; zero disables the background loop.
    pub tick_secs: f64,
    /// Test mode: start a virtual clock at this instant and expose the
    /// admin clock and tick endpoints.
    pub virtual_start: Option<Timestamp>,
    pub worker_token: Option<String>,
    pub queue: QueueConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("./data"),
            db_path: None,
            object_dir: None,
            tick_secs: 5.0,
            virtual_start: None,
            worker_token: None,
            queue: QueueConfig::default(),
        }
    }
}

impl ServeConfig {
    /// Overlays `HG_PORT`, `HG_DB_PATH`, `HG_OBJECT_DIR`, `HG_SCHED_TICK_SECS`
    /// and `HG_WORKER_TOKEN`.
    pub fn with_env(mut self) -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(p) = var("HG_PORT") {
            self.port = p.parse().map_err(|_| HgError::validation(format!("HG_PORT={p:?} is not a port")))?;
        }
        if let Some(p) = var("HG_DB_PATH") {
            self.db_path = Some(p.into());
        }
        if let Some(p) = var("HG_OBJECT_DIR") {
            self.object_dir = Some(p.into());
        }
        if let Some(t) = var("HG_SCHED_TICK_SECS") {
            self.tick_secs = t
                .parse()
                .ok()
                .filter(|t: &f64| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| HgError::validation(format!("HG_SCHED_TICK_SECS={t:?} is not a duration")))?;
        }
        if let Some(t) = var("HG_WORKER_TOKEN") {
            self.worker_token = Some(t);
        }
        Ok(self)
    }
}

/// A running server.
pub struct Server {
    pub addr: SocketAddr,
    pub worker_token: String,
    pub service: Arc<Service>,
    pub manual_clock: Option<ManualClock>,
    shutdown: watch::Sender<bool>,
    http: JoinHandle<std::io::Result<()>>,
    scheduler: Option<JoinHandle<()>>,
}

impl Server {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Signals shutdown and waits for in-flight requests.
    pub async fn shutdown(self) -> Result<()> {
        let _ = self.shutdown.send(true);
        if let Some(s) = self.scheduler {
            let _ = s.await;
        }
        self.http
            .await
            .map_err(HgError::internal)?
            .map_err(|e| HgError::new(ErrorCode::Unavailable, e.to_string()))
    }
}

fn load_worker_token(cfg: &ServeConfig) -> Result<String> {
    if let Some(t) = &cfg.worker_token {
        return Ok(t.clone());
    }
    let path = cfg.data_dir.join("worker_token");
    match std::fs::read_to_string(&path) {
        Ok(t) if !t.trim().is_empty() => Ok(t.trim().to_string()),
        _ => {
            let t = format!(
                "{}{}",
                hg_store::TOKEN_PREFIX,
                hg_core::base32_lower(&rand::random::<[u8; 20]>())
            );
            std::fs::write(&path, &t).map_err(|e| HgError::internal(format!("{}: {e}", path.display())))?;
            Ok(t)
        }
    }
}

/// Opens the store under `cfg` and builds the service.
pub fn open_service(cfg: &ServeConfig) -> Result<(Arc<Service>, Option<ManualClock>, String)> {
    std::fs::create_dir_all(&cfg.data_dir)
        .map_err(|e| HgError::new(ErrorCode::Unavailable, format!("{}: {e}", cfg.data_dir.display())))?;
    let manual = cfg.virtual_start.map(ManualClock::new);
    let clock: Arc<dyn Clock> = match &manual {
        Some(m) => Arc::new(m.clone()),
        None => Arc::new(SystemClock),
    };
    let objects: Arc<dyn ObjectStore> = Arc::new(FsObjectStore::open(
        cfg.object_dir.clone().unwrap_or_else(|| cfg.data_dir.join("objects")),
    )?);
    let db = cfg.db_path.clone().unwrap_or_else(|| cfg.data_dir.join("hg.db"));
    let store = Store::open(db, objects, clock)?.with_queue_config(cfg.queue);
    let service = Arc::new(Service::new(Arc::new(store)));
    let token = load_worker_token(cfg)?;
    service.install_worker_token(&token)?;
    Ok((service, manual, token))
}

/// Binds the listener and starts serving. A busy port is UNAVAILABLE.
pub async fn start(cfg: ServeConfig) -> Result<Server> {
    let (service, manual_clock, worker_token) = open_service(&cfg)?;
    let listener = TcpListener::bind((cfg.host.as_str(), cfg.port))
        .await
        .map_err(|e| HgError::new(ErrorCode::Unavailable, format!("bind {}:{}: {e}", cfg.host, cfg.port)))?;
    let addr = listener.local_addr().map_err(HgError::internal)?;
    let state = AppState {
        service: Arc::clone(&service),
        manual_clock: manual_clock.clone(),
        tick_secs: cfg.tick_secs,
        public_url: Some(format!("http://{addr}")),
    };
    let (tx, rx) = watch::channel(false);
    let mut http_rx = rx.clone();
    let app = router(state);
    let http = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = http_rx.wait_for(|v| *v).await;
            })
            .await
    });
    let scheduler = (cfg.tick_secs > 0.0).then(|| {
        let svc = Arc::clone(&service);
        let period = Duration::from_secs_f64(cfg.tick_secs);
        let mut rx = rx.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tokio::select! {
                    _ = interval.tick() => {}
                    _ = rx.wait_for(|v| *v) => break,
                }
                let s = Arc::clone(&svc);
                match tokio::task::spawn_blocking(move || s.tick(false)).await {
                    Ok(Ok(r)) if !r.published.is_empty() || !r.rule_runs.is_empty() || r.expired > 0 => {
                        tracing::info!(
                            published = r.published.len(),
                            expired = r.expired,
                            rule_runs = r.rule_runs.len(),
                            "scheduler tick"
                        );
                    }
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => tracing::warn!(error = %e, "scheduler tick failed"),
                    Err(e) => tracing::error!(error = %e, "scheduler task panicked"),
                }
            }
        })
    });
    tracing::info!(%addr, "listening");
    Ok(Server { addr, worker_token, service, manual_clock, shutdown: tx, http, scheduler })
}
