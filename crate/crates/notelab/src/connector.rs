//! Edge-cloud connector: durable per-topic commit logs fed by the
//! northbound framed protocol, and a sync engine replaying each log into
//! the cloud store.
//!
//! Each topic owns two files in the data directory:
//!
//! - `<encoded topic>.log`: records framed as `[u32 len][u32 crc32][JSON]`,
//!   the JSON being a [`StreamRecord`] with its offset filled in;
//! - `<encoded topic>.sync`: the decimal count of records the cloud has
//!   acknowledged, replaced atomically via rename.
//!
//! The encoded topic is the topic with every byte outside `[A-Za-z0-9_-]`
//! percent-encoded.
//!
//! Northbound frame bodies: HELLO carries [`Hello`] both ways, PRODUCE
//! carries a [`StreamRecord`], ACK carries a [`ProduceAck`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read as _, Seek, SeekFrom, Write as _};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use notelab_core::frame::{encode_log_record, scan_log, Frame, FrameType, RECORD_HEADER_LEN};
use notelab_core::link::DelayModel;
use notelab_core::record::{DedupTable, DedupVerdict, StreamRecord};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::watch;
use tokio::task::JoinSet;

use crate::cloud::{encode_cloud_value, encode_target_path, topic_cloud_path, ProjectConfig};
use crate::http::HttpClient;
use crate::service::{reap, AbortOnDrop, Connections, Service};
use crate::shim::{ShimError, ShimListener, ShimStream};

pub const DEFAULT_PORT: u16 = 9092;

const FILE_NAME: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_');

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlushPolicy {
    /// Every append reaches the OS before it is acknowledged.
    PerAppend,
    /// Appends are buffered and written every `max_records` appends, on
    /// reads, and on [`CommitLog::flush`]. Acks are not durable.
    Batched { max_records: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogConfig {
    #[serde(default = "per_append")]
    pub flush: FlushPolicy,
    /// Also fsync data before acknowledging (survives power loss, not only
    /// process death).
    #[serde(default)]
    pub fsync: bool,
}

fn per_append() -> FlushPolicy {
    FlushPolicy::PerAppend
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig { flush: FlushPolicy::PerAppend, fsync: false }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("storage full")]
    StorageFull,
    #[error("offset {from} is past the end of {topic:?} (next offset {next})")]
    OffsetOutOfRange { topic: String, from: u64, next: u64 },
    #[error("committed offset {committed} exceeds next offset {next}")]
    CommitPastEnd { committed: u64, next: u64 },
    #[error("record encoding: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("log io: {0}")]
    Io(io::Error),
}

impl From<io::Error> for LogError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            LogError::StorageFull
        } else {
            LogError::Io(e)
        }
    }
}

pub fn topic_file_stem(topic: &str) -> String {
    utf8_percent_encode(topic, FILE_NAME).to_string()
}

struct TopicState {
    file: File,
    /// Bytes written to the file.
    end: u64,
    /// Encoded records not yet written (batched policy only).
    pending: Vec<u8>,
    pending_records: usize,
    /// (body position, body length) per offset.
    index: Vec<(u64, u32)>,
    committed: u64,
}

/// One topic's append-only log. Appends and reads serialize on one lock;
/// the critical sections are a single positioned write or read.
pub struct TopicLog {
    name: String,
    sync_path: PathBuf,
    config: LogConfig,
    state: Mutex<TopicState>,
    next_tx: watch::Sender<u64>,
}

impl TopicLog {
    fn create(dir: &Path, name: &str, config: LogConfig) -> Result<TopicLog, LogError> {
        let stem = topic_file_stem(name);
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(dir.join(format!("{stem}.log")))?;
        let state = TopicState { file, end: 0, pending: Vec::new(), pending_records: 0, index: Vec::new(), committed: 0 };
        Ok(TopicLog {
            name: name.to_string(),
            sync_path: dir.join(format!("{stem}.sync")),
            config,
            state: Mutex::new(state),
            next_tx: watch::channel(0).0,
        })
    }

    /// Scans the existing file, truncating at the first torn, corrupt or
    /// out-of-sequence record. Returns the surviving records.
    fn recover(dir: &Path, name: &str, config: LogConfig) -> Result<(TopicLog, Vec<StreamRecord>), LogError> {
        let log = TopicLog::create(dir, name, config)?;
        let mut records = Vec::new();
        {
            let mut st = log.state.lock().unwrap();
            let mut bytes = Vec::new();
            st.file.read_to_end(&mut bytes)?;
            let mut valid = 0usize;
            for span in scan_log(&bytes).records {
                let expected = records.len() as u64;
                match serde_json::from_slice::<StreamRecord>(span.body(&bytes)) {
                    Ok(r) if r.offset == Some(expected) && r.topic == name => {
                        st.index.push((span.start as u64, span.len as u32));
                        records.push(r);
                        valid = span.start + span.len;
                    }
                    _ => break,
                }
            }
            if valid < bytes.len() {
                log::warn!("{name}: truncating {} bytes of torn or corrupt tail", bytes.len() - valid);
                st.file.set_len(valid as u64)?;
                if config.fsync {
                    st.file.sync_data()?;
                }
            }
            st.end = valid as u64;
            let next = st.index.len() as u64;
            st.committed = match fs::read_to_string(&log.sync_path) {
                Ok(s) => s.trim().parse::<u64>().unwrap_or(0).min(next),
                Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
                Err(e) => return Err(e.into()),
            };
            log.next_tx.send_replace(next);
        }
        Ok((log, records))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn next_offset(&self) -> u64 {
        self.state.lock().unwrap().index.len() as u64
    }

    pub fn committed(&self) -> u64 {
        self.state.lock().unwrap().committed
    }

    /// Follows `next_offset`.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.next_tx.subscribe()
    }

    fn append(&self, record: &mut StreamRecord) -> Result<u64, LogError> {
        let mut st = self.state.lock().unwrap();
        let offset = st.index.len() as u64;
        record.offset = Some(offset);
        let body = serde_json::to_vec(record)?;
        let bytes = encode_log_record(&body);
        let body_pos = st.end + st.pending.len() as u64 + RECORD_HEADER_LEN as u64;
        match self.config.flush {
            FlushPolicy::PerAppend => write_at_end(&mut st, &bytes, self.config.fsync)?,
            FlushPolicy::Batched { max_records } => {
                st.pending.extend_from_slice(&bytes);
                st.pending_records += 1;
                if st.pending_records >= max_records.max(1) {
                    flush_pending(&mut st, self.config.fsync)?;
                }
            }
        }
        st.index.push((body_pos, body.len() as u32));
        self.next_tx.send_replace(offset + 1);
        Ok(offset)
    }

    /// Up to `max` records starting at `from`. Reading at the tail yields
    /// an empty batch.
    pub fn read(&self, from: u64, max: usize) -> Result<Vec<StreamRecord>, LogError> {
        let mut st = self.state.lock().unwrap();
        let next = st.index.len() as u64;
        if from > next {
            return Err(LogError::OffsetOutOfRange { topic: self.name.clone(), from, next });
        }
        flush_pending(&mut st, self.config.fsync)?;
        let end = next.min(from.saturating_add(max as u64));
        let mut out = Vec::with_capacity((end - from) as usize);
        for off in from..end {
            let (pos, len) = st.index[off as usize];
            let mut body = vec![0u8; len as usize];
            st.file.seek(SeekFrom::Start(pos))?;
            st.file.read_exact(&mut body)?;
            out.push(serde_json::from_slice(&body)?);
        }
        Ok(out)
    }

    /// Durably records that the first `committed` records reached the
    /// cloud. Never moves backwards.
    pub fn set_committed(&self, committed: u64) -> Result<(), LogError> {
        let mut st = self.state.lock().unwrap();
        let next = st.index.len() as u64;
        if committed > next {
            return Err(LogError::CommitPastEnd { committed, next });
        }
        if committed <= st.committed {
            return Ok(());
        }
        let tmp = self.sync_path.with_extension("sync.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(committed.to_string().as_bytes())?;
            if self.config.fsync {
                f.sync_data()?;
            }
        }
        fs::rename(&tmp, &self.sync_path)?;
        st.committed = committed;
        Ok(())
    }

    fn flush(&self) -> Result<(), LogError> {
        flush_pending(&mut self.state.lock().unwrap(), self.config.fsync)
    }
}

/// Writes `bytes` at the logical end; on failure the file is cut back so
/// no partial record survives.
fn write_at_end(st: &mut TopicState, bytes: &[u8], fsync: bool) -> Result<(), LogError> {
    let end = st.end;
    let res = st
        .file
        .seek(SeekFrom::Start(end))
        .and_then(|_| st.file.write_all(bytes))
        .and_then(|_| if fsync { st.file.sync_data() } else { Ok(()) });
    if let Err(e) = res {
        let _ = st.file.set_len(end);
        return Err(e.into());
    }
    st.end += bytes.len() as u64;
    Ok(())
}

fn flush_pending(st: &mut TopicState, fsync: bool) -> Result<(), LogError> {
    if st.pending.is_empty() {
        return Ok(());
    }
    let pending = std::mem::take(&mut st.pending);
    if let Err(e) = write_at_end(st, &pending, fsync) {
        st.pending = pending;
        return Err(e);
    }
    st.pending_records = 0;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendAck {
    pub topic: String,
    /// Unknown only for a duplicate older than the source's latest record.
    pub offset: Option<u64>,
    pub duplicate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicOffsets {
    pub next_offset: u64,
    pub committed: u64,
}

/// The set of topic logs in one data directory, plus the dedup table
/// rebuilt from them.
pub struct CommitLog {
    dir: PathBuf,
    config: LogConfig,
    // Lock order: dedup, then topics, then a topic's state.
    dedup: Mutex<DedupTable>,
    topics: RwLock<BTreeMap<String, Arc<TopicLog>>>,
    topic_count: watch::Sender<usize>,
}

impl CommitLog {
    pub fn open(dir: impl Into<PathBuf>, config: LogConfig) -> Result<CommitLog, LogError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut topics = BTreeMap::new();
        let mut dedup = DedupTable::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("log") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let Ok(name) = percent_decode_str(stem).decode_utf8() else {
                log::warn!("skipping log file with undecodable name {}", path.display());
                continue;
            };
            let (topic, records) = TopicLog::recover(&dir, &name, config)?;
            for r in &records {
                dedup.observe(r, r.offset.expect("recovered records carry offsets"));
            }
            topics.insert(name.into_owned(), Arc::new(topic));
        }
        let count = topics.len();
        Ok(CommitLog {
            dir,
            config,
            dedup: Mutex::new(dedup),
            topics: RwLock::new(topics),
            topic_count: watch::channel(count).0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends unless `(proxy_id, source, seq)` was already logged.
    pub fn append(&self, mut record: StreamRecord) -> Result<AppendAck, LogError> {
        let mut dedup = self.dedup.lock().unwrap();
        if let DedupVerdict::Duplicate { offset } = dedup.check(&record) {
            return Ok(AppendAck { topic: record.topic, offset, duplicate: true });
        }
        let topic = self.topic_or_create(&record.topic)?;
        let offset = topic.append(&mut record)?;
        dedup.observe(&record, offset);
        Ok(AppendAck { topic: record.topic, offset: Some(offset), duplicate: false })
    }

    fn topic_or_create(&self, name: &str) -> Result<Arc<TopicLog>, LogError> {
        if let Some(t) = self.topics.read().unwrap().get(name) {
            return Ok(t.clone());
        }
        let mut topics = self.topics.write().unwrap();
        if let Some(t) = topics.get(name) {
            return Ok(t.clone());
        }
        let t = Arc::new(TopicLog::create(&self.dir, name, self.config)?);
        topics.insert(name.to_string(), t.clone());
        self.topic_count.send_replace(topics.len());
        Ok(t)
    }

    pub fn topic(&self, name: &str) -> Option<Arc<TopicLog>> {
        self.topics.read().unwrap().get(name).cloned()
    }

    pub fn topics(&self) -> Vec<Arc<TopicLog>> {
        self.topics.read().unwrap().values().cloned().collect()
    }

    /// Changes whenever a topic is created.
    pub fn watch_topics(&self) -> watch::Receiver<usize> {
        self.topic_count.subscribe()
    }

    /// A topic never written to reads as an empty log.
    pub fn read(&self, topic: &str, from: u64, max: usize) -> Result<Vec<StreamRecord>, LogError> {
        match self.topic(topic) {
            Some(t) => t.read(from, max),
            None if from == 0 => Ok(Vec::new()),
            None => Err(LogError::OffsetOutOfRange { topic: topic.to_string(), from, next: 0 }),
        }
    }

    pub fn offsets(&self) -> BTreeMap<String, TopicOffsets> {
        self.topics()
            .into_iter()
            .map(|t| {
                let st = t.state.lock().unwrap();
                (t.name.clone(), TopicOffsets { next_offset: st.index.len() as u64, committed: st.committed })
            })
            .collect()
    }

    pub fn flush(&self) -> Result<(), LogError> {
        for t in self.topics() {
            t.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub proxy_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProduceAck {
    pub topic: String,
    pub offset: Option<u64>,
    pub duplicate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Northbound listener appending PRODUCE frames to the commit log.
pub struct ConnectorServer {
    service: Service,
    lose_acks: Arc<AtomicU32>,
}

impl ConnectorServer {
    pub async fn bind(addr: SocketAddr, log: Arc<CommitLog>) -> Result<ConnectorServer, ShimError> {
        let listener = ShimListener::bind(addr, DelayModel::default()).await?;
        let local = listener.local_addr();
        let lose_acks = Arc::new(AtomicU32::new(0));
        let lose = lose_acks.clone();
        let task = tokio::spawn(async move {
            let mut conns = Connections::new();
            loop {
                let Ok(stream) = listener.accept().await else { continue };
                reap(&mut conns);
                conns.spawn(serve_northbound(stream, log.clone(), lose.clone()));
            }
        });
        Ok(ConnectorServer { service: Service::new(local, task), lose_acks })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.service.local_addr()
    }

    pub fn is_running(&self) -> bool {
        self.service.is_running()
    }

    /// Fault injection: the next `n` PRODUCE frames are appended but their
    /// ACK is swallowed and the connection closed.
    pub fn lose_next_acks(&self, n: u32) {
        self.lose_acks.store(n, Ordering::SeqCst);
    }

    pub async fn shutdown(&mut self) {
        self.service.shutdown().await;
    }
}

async fn serve_northbound(mut stream: ShimStream, log: Arc<CommitLog>, lose_acks: Arc<AtomicU32>) {
    let peer = stream.peer_addr();
    let mut buf = Vec::with_capacity(4096);
    loop {
        loop {
            let frame = match Frame::decode(&buf) {
                Ok(Some((frame, used))) => {
                    buf.drain(..used);
                    frame
                }
                Ok(None) => break,
                Err(e) => {
                    log::warn!("northbound {peer}: {e}; closing");
                    return;
                }
            };
            let reply = match frame.kind {
                FrameType::Hello => Frame::new(FrameType::Hello, frame.body),
                FrameType::Produce => {
                    let ack = match serde_json::from_slice::<StreamRecord>(&frame.body) {
                        Ok(record) => match log.append(record) {
                            Ok(a) => ProduceAck { topic: a.topic, offset: a.offset, duplicate: a.duplicate, error: None },
                            Err(e) => ProduceAck { topic: String::new(), offset: None, duplicate: false, error: Some(e.to_string()) },
                        },
                        Err(e) => ProduceAck { topic: String::new(), offset: None, duplicate: false, error: Some(e.to_string()) },
                    };
                    if lose_acks.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
                        return;
                    }
                    Frame::new(FrameType::Ack, serde_json::to_vec(&ack).expect("ack serializes"))
                }
                FrameType::Ack => {
                    log::warn!("northbound {peer}: unexpected ACK; closing");
                    return;
                }
            };
            if stream.write_all(&reply.encode()).await.is_err() {
                return;
            }
        }
        match stream.read_buf(&mut buf).await {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub project: ProjectConfig,
    /// Where the cloud store actually listens.
    pub cloud_addr: SocketAddr,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_backoff_initial")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_backoff_factor")]
    pub backoff_factor: u32,
    #[serde(default = "default_backoff_cap")]
    pub backoff_cap_ms: u64,
    #[serde(default)]
    pub link: DelayModel,
}

fn default_batch() -> usize {
    32
}
fn default_backoff_initial() -> u64 {
    500
}
fn default_backoff_factor() -> u32 {
    2
}
fn default_backoff_cap() -> u64 {
    30_000
}

impl SyncConfig {
    pub fn new(project: ProjectConfig, cloud_addr: SocketAddr) -> Self {
        SyncConfig {
            project,
            cloud_addr,
            batch: default_batch(),
            backoff_initial_ms: default_backoff_initial(),
            backoff_factor: default_backoff_factor(),
            backoff_cap_ms: default_backoff_cap(),
            link: DelayModel::default(),
        }
    }

    fn next_backoff(&self, current: Duration) -> Duration {
        (current * self.backoff_factor).min(Duration::from_millis(self.backoff_cap_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncHalt {
    AuthRejected { topic: String, status: u16 },
}

#[derive(Debug, Default)]
pub struct SyncStats {
    pub batches: AtomicU64,
    pub records: AtomicU64,
    pub failures: AtomicU64,
    halt: Mutex<Option<SyncHalt>>,
}

/// Replays every topic log into the cloud, one task per topic, strictly in
/// offset order. A topic's committed offset moves only after the cloud
/// acknowledged the batch.
pub struct SyncEngine {
    task: Option<AbortOnDrop>,
    stats: Arc<SyncStats>,
}

impl SyncEngine {
    pub fn start(log: Arc<CommitLog>, cfg: SyncConfig) -> SyncEngine {
        let stats = Arc::new(SyncStats::default());
        let task = tokio::spawn(supervise(log, cfg, stats.clone()));
        SyncEngine { task: Some(AbortOnDrop(task)), stats }
    }

    pub fn stats(&self) -> &SyncStats {
        &self.stats
    }

    pub fn halted(&self) -> Option<SyncHalt> {
        self.stats.halt.lock().unwrap().clone()
    }

    pub fn is_running(&self) -> bool {
        self.task.as_ref().is_some_and(|t| !t.0.is_finished())
    }

    pub async fn shutdown(&mut self) {
        if let Some(mut t) = self.task.take() {
            t.0.abort();
            let _ = (&mut t.0).await;
        }
    }
}

async fn supervise(log: Arc<CommitLog>, cfg: SyncConfig, stats: Arc<SyncStats>) {
    let mut topics_rx = log.watch_topics();
    let mut started = BTreeSet::new();
    let mut tasks = JoinSet::new();
    loop {
        for t in log.topics() {
            if started.insert(t.name().to_string()) {
                tasks.spawn(sync_topic(t, cfg.clone(), stats.clone()));
            }
        }
        if topics_rx.changed().await.is_err() {
            break;
        }
    }
    while tasks.join_next().await.is_some() {}
}

/// `{"<offset>": <value>, ...}` with each value spliced in as raw JSON.
fn patch_body(records: &[StreamRecord]) -> Vec<u8> {
    let mut body = Vec::from(&b"{"[..]);
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            body.push(b',');
        }
        body.extend_from_slice(format!("\"{}\":", r.offset.expect("logged records carry offsets")).as_bytes());
        body.extend_from_slice(encode_cloud_value(&r.payload).as_bytes());
    }
    body.push(b'}');
    body
}

async fn sync_topic(topic: Arc<TopicLog>, cfg: SyncConfig, stats: Arc<SyncStats>) {
    let auth: String = url::form_urlencoded::byte_serialize(cfg.project.auth_key.as_bytes()).collect();
    let target = format!("{}.json?auth={auth}", encode_target_path(&topic_cloud_path(topic.name())));
    let host = cfg.project.base_url().trim_start_matches("https://").to_string();
    let mut client = HttpClient::new(cfg.cloud_addr, cfg.link).with_host(host).with_timeout(Duration::from_secs(5));
    let mut appended = topic.subscribe();
    let initial = Duration::from_millis(cfg.backoff_initial_ms);
    let mut backoff = initial;
    loop {
        let committed = topic.committed();
        let batch = match topic.read(committed, cfg.batch.max(1)) {
            Ok(b) => b,
            Err(e) => {
                log::error!("sync {}: cannot read log: {e}", topic.name());
                return;
            }
        };
        if batch.is_empty() {
            if appended.wait_for(|&next| next > committed).await.is_err() {
                return;
            }
            continue;
        }
        match client.patch_json(&target, &patch_body(&batch)).await {
            Ok(resp) if resp.status == 200 => {
                if let Err(e) = topic.set_committed(committed + batch.len() as u64) {
                    log::error!("sync {}: cannot persist committed offset: {e}", topic.name());
                    return;
                }
                stats.batches.fetch_add(1, Ordering::Relaxed);
                stats.records.fetch_add(batch.len() as u64, Ordering::Relaxed);
                backoff = initial;
                continue;
            }
            Ok(resp) if resp.status == 401 || resp.status == 403 => {
                log::error!("sync {}: cloud rejected the auth key ({}); halting", topic.name(), resp.status);
                *stats.halt.lock().unwrap() = Some(SyncHalt::AuthRejected { topic: topic.name().to_string(), status: resp.status });
                return;
            }
            Ok(resp) => log::warn!("sync {}: cloud answered {}; retrying in {backoff:?}", topic.name(), resp.status),
            Err(e) => log::debug!("sync {}: {e}; retrying in {backoff:?}", topic.name()),
        }
        stats.failures.fetch_add(1, Ordering::Relaxed);
        tokio::time::sleep(backoff).await;
        backoff = cfg.next_backoff(backoff);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConnectorError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Bind(#[from] ShimError),
}

/// Commit log, northbound server and (optionally) sync engine together.
pub struct Connector {
    log: Arc<CommitLog>,
    server: ConnectorServer,
    sync: Option<SyncEngine>,
}

impl Connector {
    pub async fn start(
        data_dir: impl Into<PathBuf>,
        config: LogConfig,
        listen: SocketAddr,
        sync: Option<SyncConfig>,
    ) -> Result<Connector, ConnectorError> {
        let log = Arc::new(CommitLog::open(data_dir, config)?);
        let server = ConnectorServer::bind(listen, log.clone()).await?;
        let sync = sync.map(|cfg| SyncEngine::start(log.clone(), cfg));
        Ok(Connector { log, server, sync })
    }

    pub fn log(&self) -> &Arc<CommitLog> {
        &self.log
    }

    pub fn server(&self) -> &ConnectorServer {
        &self.server
    }

    pub fn sync(&self) -> Option<&SyncEngine> {
        self.sync.as_ref()
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn is_running(&self) -> bool {
        self.server.is_running()
    }

    /// Stops ingest first so nothing is appended after the final flush.
    pub async fn shutdown(&mut self) -> Result<(), LogError> {
        self.server.shutdown().await;
        if let Some(s) = self.sync.as_mut() {
            s.shutdown().await;
        }
        self.log.flush()
    }
}
