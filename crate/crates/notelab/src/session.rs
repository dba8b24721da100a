//! A launched topology and the loopback admin endpoint other processes use
//! to query, benchmark and stop it.
//!
//! `up` runs in the foreground. Once every component is running it writes
//! `runtime.json` into the data directory, holding its pid and the admin
//! address; the file is removed again after shutdown. A runtime file whose
//! admin endpoint does not answer is stale and is ignored.
//!
//! Admin routes: `GET /status`, `POST /down`, `POST /bench` (body: a
//! scenario config, reply: the bench report).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use notelab_core::http::{Method, Request, Response};
use notelab_core::link::DelayModel;
use serde::{Deserialize, Serialize};
use tokio::sync::{Notify, RwLock};

use crate::bench::{run_scenario, BenchReport, ScenarioConfig};
use crate::http::{handler, HttpClient, HttpServer};
use crate::topology::{LaunchFailed, Running, StatusReport, TopologyConfig};

pub const RUNTIME_FILE: &str = "runtime.json";
pub const DATA_DIR_ENV: &str = "NOTELAB_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "notelab-data";
const ADMIN_TIMEOUT: Duration = Duration::from_secs(5);
const BENCH_TIMEOUT: Duration = Duration::from_secs(3600);
const DOWN_TIMEOUT: Duration = Duration::from_secs(30);

/// `$NOTELAB_DATA_DIR`, or `notelab-data` in the working directory.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub pid: u32,
    pub admin: SocketAddr,
    pub name: String,
    pub started_unix_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("a topology is already up (pid {pid}, admin {admin}); run `down` first")]
    AlreadyUp { pid: u32, admin: SocketAddr },
    #[error("no topology is up in {0}")]
    NotUp(PathBuf),
    #[error(transparent)]
    Launch(#[from] LaunchFailed),
    #[error("admin endpoint: {0}")]
    Admin(String),
    #[error("{0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn runtime_path(dir: &Path) -> PathBuf {
    dir.join(RUNTIME_FILE)
}

pub fn read_runtime(dir: &Path) -> Option<RuntimeInfo> {
    let bytes = std::fs::read(runtime_path(dir)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn write_runtime(dir: &Path, info: &RuntimeInfo) -> std::io::Result<()> {
    let tmp = dir.join(format!("{RUNTIME_FILE}.tmp"));
    std::fs::write(&tmp, serde_json::to_vec_pretty(info).expect("runtime info serializes"))?;
    std::fs::rename(tmp, runtime_path(dir))
}

async fn admin(info: &RuntimeInfo, method: Method, path: &str, body: Vec<u8>, timeout: Duration) -> Result<Response, SessionError> {
    let mut c = HttpClient::new(info.admin, DelayModel::default()).with_timeout(timeout);
    let mut req = Request::new(method, path);
    if !body.is_empty() {
        req = req.header("Content-Type", "application/json").body(body);
    }
    c.send(req).await.map_err(|e| SessionError::Admin(e.to_string()))
}

/// The live session in `dir`, removing a stale runtime file.
pub async fn live_session(dir: &Path) -> Option<RuntimeInfo> {
    let info = read_runtime(dir)?;
    match admin(&info, Method::Get, "/status", Vec::new(), ADMIN_TIMEOUT).await {
        Ok(r) if r.status == 200 => Some(info),
        _ => {
            let _ = std::fs::remove_file(runtime_path(dir));
            None
        }
    }
}

pub async fn status(dir: &Path) -> Result<StatusReport, SessionError> {
    let info = live_session(dir).await.ok_or_else(|| SessionError::NotUp(dir.into()))?;
    let r = admin(&info, Method::Get, "/status", Vec::new(), ADMIN_TIMEOUT).await?;
    serde_json::from_slice(&r.body).map_err(|e| SessionError::Admin(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownOutcome {
    Stopped,
    NotRunning,
}

/// Asks the session to stop and waits until it has. Without a live
/// session this does nothing.
pub async fn down(dir: &Path) -> Result<DownOutcome, SessionError> {
    let Some(info) = live_session(dir).await else { return Ok(DownOutcome::NotRunning) };
    let r = admin(&info, Method::Post, "/down", Vec::new(), ADMIN_TIMEOUT).await?;
    if r.status != 200 {
        return Err(SessionError::Admin(format!("down answered {}", r.status)));
    }
    let deadline = tokio::time::Instant::now() + DOWN_TIMEOUT;
    while read_runtime(dir).is_some_and(|i| i == info) {
        if tokio::time::Instant::now() > deadline {
            return Err(SessionError::Admin("session did not stop in time".into()));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    Ok(DownOutcome::Stopped)
}

/// Runs a scenario inside the live session, where all components share
/// one clock.
pub async fn bench(dir: &Path, cfg: &ScenarioConfig) -> Result<BenchReport, SessionError> {
    let info = live_session(dir).await.ok_or_else(|| SessionError::NotUp(dir.into()))?;
    let body = serde_json::to_vec(cfg).expect("scenario serializes");
    let r = admin(&info, Method::Post, "/bench", body, BENCH_TIMEOUT).await?;
    if r.status != 200 {
        return Err(SessionError::Remote(String::from_utf8_lossy(&r.body).into_owned()));
    }
    serde_json::from_slice(&r.body).map_err(|e| SessionError::Admin(e.to_string()))
}

fn json(status: u16, v: &impl Serialize) -> Response {
    Response::with_body(status, "application/json", serde_json::to_vec_pretty(v).expect("reply serializes"))
}

fn text(status: u16, msg: impl Into<String>) -> Response {
    Response::with_body(status, "text/plain", msg.into().into_bytes())
}

/// A launched topology serving its admin endpoint.
pub struct Session {
    running: Arc<RwLock<Running>>,
    admin: HttpServer,
    stop: Arc<Notify>,
    dir: PathBuf,
    info: RuntimeInfo,
}

impl Session {
    /// Launches `config` with state under `dir`. Rejected while another
    /// session is live in the same directory.
    pub async fn start(config: TopologyConfig, dir: &Path) -> Result<Session, SessionError> {
        std::fs::create_dir_all(dir)?;
        if let Some(info) = live_session(dir).await {
            return Err(SessionError::AlreadyUp { pid: info.pid, admin: info.admin });
        }
        let name = config.name.clone();
        let running = Arc::new(RwLock::new(Running::up(config, dir).await?));
        let stop = Arc::new(Notify::new());

        let (r, s) = (running.clone(), stop.clone());
        let h = handler(move |req: Request, _| {
            let (running, stop) = (r.clone(), s.clone());
            async move {
                match (req.method, req.path()) {
                    (Method::Get, "/status") => json(200, &running.read().await.status()).into(),
                    (Method::Post, "/down") => {
                        stop.notify_one();
                        text(200, "stopping").into()
                    }
                    (Method::Post, "/bench") => {
                        let cfg: ScenarioConfig = match serde_json::from_slice(&req.body) {
                            Ok(c) => c,
                            Err(e) => return text(400, format!("bad scenario: {e}")).into(),
                        };
                        let run = running.read().await;
                        let Some(target) = run.bench_target(cfg.protocol) else {
                            return text(422, format!("the topology has no {} proxy", cfg.protocol.label())).into();
                        };
                        match run_scenario(&cfg, &target).await {
                            Ok(report) => json(200, &report).into(),
                            Err(e) => text(422, e.to_string()).into(),
                        }
                    }
                    (_, "/status" | "/down" | "/bench") => Response::new(405).into(),
                    _ => Response::new(404).into(),
                }
            }
        });
        let local: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
        let admin = match HttpServer::bind(local, h).await {
            Ok(a) => a,
            Err(e) => {
                running.write().await.down().await;
                return Err(SessionError::Admin(e.to_string()));
            }
        };
        let started_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        let info = RuntimeInfo { pid: std::process::id(), admin: admin.local_addr(), name, started_unix_ms };
        let mut session = Session { running, admin, stop, dir: dir.to_path_buf(), info };
        if let Err(e) = write_runtime(dir, &session.info) {
            session.shutdown().await;
            return Err(e.into());
        }
        Ok(session)
    }

    pub fn info(&self) -> &RuntimeInfo {
        &self.info
    }

    pub fn running(&self) -> &Arc<RwLock<Running>> {
        &self.running
    }

    /// Resolves when `POST /down` arrives.
    pub async fn stop_requested(&self) {
        self.stop.notified().await
    }

    /// Same path for `down`, signals and errors: components stop in
    /// reverse order, then the runtime file goes away.
    pub async fn shutdown(&mut self) {
        self.running.write().await.down().await;
        if read_runtime(&self.dir).is_some_and(|i| i == self.info) {
            let _ = std::fs::remove_file(runtime_path(&self.dir));
        }
        self.admin.shutdown().await;
    }
}

/// Runs a session until `down`, SIGINT or SIGTERM.
pub async fn serve(config: TopologyConfig, dir: &Path) -> Result<(), SessionError> {
    let mut session = Session::start(config, dir).await?;
    log::info!("topology {:?} is up; admin at {}", session.info.name, session.info.admin);
    tokio::select! {
        _ = session.stop_requested() => log::info!("down requested"),
        _ = terminate_signal() => log::info!("signal received"),
    }
    session.shutdown().await;
    Ok(())
}

#[cfg(unix)]
async fn terminate_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    match signal(SignalKind::terminate()) {
        Ok(mut term) => {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        Err(_) => {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}

#[cfg(not(unix))]
async fn terminate_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{Protocol, Scope};
    use crate::topology::self_contained;
    use notelab_core::SizeClass;

    #[tokio::test]
    async fn session_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(down(dir.path()).await.unwrap(), DownOutcome::NotRunning);
        assert!(matches!(status(dir.path()).await, Err(SessionError::NotUp(_))));

        let mut s = Session::start(self_contained(), dir.path()).await.unwrap();
        assert_eq!(read_runtime(dir.path()).as_ref(), Some(s.info()));
        let st = status(dir.path()).await.unwrap();
        assert!(st.all_healthy(), "{st:?}");
        assert_eq!(st.components.len(), 5);

        let again = Session::start(self_contained(), dir.path()).await;
        assert!(matches!(again, Err(SessionError::AlreadyUp { .. })));

        let mut cfg = ScenarioConfig::new(Protocol::Coap, Scope::Edge);
        cfg.n_messages = 5;
        cfg.warmup = 0;
        cfg.size_classes = vec![SizeClass::B10];
        let report = bench(dir.path(), &cfg).await.unwrap();
        assert_eq!(report.results[0].counters.received, 5);

        let stopper = tokio::spawn({
            let dir = dir.path().to_path_buf();
            async move { down(&dir).await.unwrap() }
        });
        s.stop_requested().await;
        s.shutdown().await;
        assert_eq!(stopper.await.unwrap(), DownOutcome::Stopped);
        assert!(read_runtime(dir.path()).is_none());
        assert_eq!(down(dir.path()).await.unwrap(), DownOutcome::NotRunning);
    }

    #[tokio::test]
    async fn stale_runtime_file_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        write_runtime(dir.path(), &RuntimeInfo { pid: 1, admin: dead, name: "old".into(), started_unix_ms: 0 }).unwrap();
        assert!(live_session(dir.path()).await.is_none());
        assert!(read_runtime(dir.path()).is_none());
    }
}
