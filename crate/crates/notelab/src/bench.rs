//! Latency and wire-overhead measurements.
//!
//! A scenario publishes `warmup + n_messages` probes per size class through
//! one protocol and timestamps each probe at send and at receipt. Probes
//! are the decimal seq padded to the size class, so the 10-byte class is
//! exactly 10 bytes on the application layer. Receipt points:
//!
//! - edge scope: a harness MQTT subscriber on the proxy broker, or the
//!   proxy's ingest tap for CoAP and HTTP;
//! - end-to-end scope: the cloud change stream, with the edge receipt of
//!   the same probes recorded alongside.
//!
//! Samples pair by seq, never by arrival order. Warmup probes are sent but
//! excluded from counters and statistics.
//!
//! Report files, all with a fixed field order:
//!
//! - `report.json`: the whole [`BenchReport`];
//! - `samples.csv`: one row per received sample;
//! - `boxplot.json`: five-number summaries per result row.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use notelab_core::coap::{Code, Timing};
use notelab_core::http::{Method, Request, Response};
use notelab_core::link::{DelayModel, DelayModelError};
use notelab_core::model::{pad_to_size_class, strip_padding};
use notelab_core::mqtt::Packet;
use notelab_core::record::payload_from_cloud_text;
use notelab_core::stats::{five_number_summary, FiveNumber};
use notelab_core::{compute_stats, LatencySample, LatencyStats, SizeClass, TopicFilter};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::clock::now_monotonic_ns;
use crate::cloud::{encode_target_path, topic_cloud_path, ChangeEvent, CloudServer, ProjectConfig};
use crate::coap::{CoapClient, CoapHandler, CoapServer};
use crate::connector::{Connector, LogConfig, SyncConfig};
use crate::http::{handler, HttpClient, HttpServer, LineStream};
use crate::mqtt::{Broker, ClientOptions, MqttClient};
use crate::proxy::{Flavor, Proxy, ProxyConfig, TapEvent, TELEMETRY_PATH};
use crate::service::AbortOnDrop;

pub const SCHEMA_VERSION: u32 = 1;
/// Fraction of probes that must arrive before the timeout.
pub const MIN_DELIVERY_RATIO: f64 = 0.9;
/// Topic used for MQTT in the overhead comparison.
pub const OVERHEAD_MQTT_TOPIC: &str = "DHTsensor/Temp_humidity";
/// `Host` header value used for HTTP in the overhead comparison.
pub const OVERHEAD_HTTP_HOST: &str = "192.168.1.1:8080";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Mqtt,
    Coap,
    Http,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Mqtt, Protocol::Coap, Protocol::Http];

    pub fn label(self) -> &'static str {
        match self {
            Protocol::Mqtt => "mqtt",
            Protocol::Coap => "coap",
            Protocol::Http => "http",
        }
    }

    pub fn flavor(self) -> Flavor {
        match self {
            Protocol::Mqtt => Flavor::MqttProxy,
            Protocol::Coap => Flavor::CoapProxy,
            Protocol::Http => Flavor::HttpProxy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Edge,
    EndToEnd,
}

impl Scope {
    pub fn label(self) -> &'static str {
        match self {
            Scope::Edge => "edge",
            Scope::EndToEnd => "end-to-end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub protocol: Protocol,
    #[serde(default = "all_sizes")]
    pub size_classes: Vec<SizeClass>,
    #[serde(default = "default_n")]
    pub n_messages: u64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    /// Applied to the measurement publisher's link.
    #[serde(default)]
    pub delay_model: DelayModel,
    #[serde(default = "edge")]
    pub scope: Scope,
    #[serde(default)]
    pub seed: u64,
    /// Pause between consecutive probes.
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
    /// How long to wait for stragglers after the last send.
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_coap_ack")]
    pub coap_ack_timeout_ms: u64,
}

fn all_sizes() -> Vec<SizeClass> {
    SizeClass::ALL.to_vec()
}
fn default_n() -> u64 {
    100
}
fn default_warmup() -> u64 {
    10
}
fn edge() -> Scope {
    Scope::Edge
}
fn default_interval() -> u64 {
    10
}
fn default_timeout() -> u64 {
    30_000
}
fn default_coap_ack() -> u64 {
    2_000
}

impl ScenarioConfig {
    pub fn new(protocol: Protocol, scope: Scope) -> Self {
        ScenarioConfig {
            protocol,
            size_classes: all_sizes(),
            n_messages: default_n(),
            warmup: default_warmup(),
            delay_model: DelayModel::default(),
            scope,
            seed: 0,
            interval_ms: default_interval(),
            timeout_ms: default_timeout(),
            coap_ack_timeout_ms: default_coap_ack(),
        }
    }

    /// The publisher link, with the scenario seed unless the model sets one.
    fn link(&self) -> DelayModel {
        if self.delay_model.seed == 0 {
            self.delay_model.with_seed(self.seed)
        } else {
            self.delay_model
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{protocol:?} {class}: only {received} of {expected} probes arrived before the timeout")]
    ScenarioTimeout { protocol: Protocol, class: SizeClass, received: u64, expected: u64 },
    #[error("end-to-end scope needs a cloud endpoint")]
    NoCloud,
    #[error("delay model: {0}")]
    Model(#[from] DelayModelError),
    #[error("setup: {0}")]
    Setup(String),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Encode(String),
}

fn setup<E: std::fmt::Display>(e: E) -> BenchError {
    BenchError::Setup(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub sent: u64,
    pub received: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub protocol: Protocol,
    pub scope: Scope,
    pub size_class: SizeClass,
    pub counters: Counters,
    /// Absent when nothing was received.
    pub stats: Option<LatencyStats>,
    /// Measured seqs that never surfaced.
    pub unmatched: Vec<u64>,
    /// Loss decisions taken on the publisher's datagram link, in send
    /// order; empty for stream transports.
    pub link_drops: Vec<bool>,
    pub samples: Vec<LatencySample>,
}

impl ClassResult {
    fn build(
        protocol: Protocol,
        scope: Scope,
        size_class: SizeClass,
        sends: &BTreeMap<u64, u64>,
        receipts: &BTreeMap<u64, u64>,
        link_drops: Vec<bool>,
    ) -> ClassResult {
        let samples: Vec<LatencySample> = sends
            .iter()
            .filter_map(|(&seq, &send)| {
                receipts.get(&seq).map(|&recv| LatencySample { seq, send_ts_ns: send, recv_ts_ns: recv.max(send) })
            })
            .collect();
        let unmatched: Vec<u64> = sends.keys().filter(|s| !receipts.contains_key(s)).copied().collect();
        let latencies: Vec<f64> = samples.iter().map(LatencySample::latency_s).collect();
        let received = samples.len() as u64;
        let sent = sends.len() as u64;
        ClassResult {
            protocol,
            scope,
            size_class,
            counters: Counters { sent, received, dropped: sent - received },
            stats: compute_stats(&latencies).ok(),
            unmatched,
            link_drops,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub scenario: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub protocol: Protocol,
    pub target: String,
    pub payload_len: usize,
    /// Client-to-server bytes for one message, measured at the socket.
    pub bytes_per_message: u64,
    pub bytes_per_1000: u64,
    /// Same message encoded directly by the codec.
    pub codec_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub manifest: Manifest,
    pub results: Vec<ClassResult>,
    pub overhead: Vec<OverheadRow>,
}

impl BenchReport {
    pub fn result(&self, scope: Scope, class: SizeClass) -> Option<&ClassResult> {
        self.results.iter().find(|r| r.scope == scope && r.size_class == class)
    }

    /// Per size class: end-to-end mean exceeds edge mean. Only classes
    /// with both scopes measured appear.
    pub fn end_to_end_slower(&self) -> Vec<(SizeClass, bool)> {
        let mut out = Vec::new();
        for r in self.results.iter().filter(|r| r.scope == Scope::EndToEnd) {
            let edge = self.result(Scope::Edge, r.size_class).and_then(|e| e.stats);
            if let (Some(e2e), Some(edge)) = (r.stats, edge) {
                out.push((r.size_class, e2e.mean_s > edge.mean_s));
            }
        }
        out
    }
}

/// Where a scenario sends and listens.
pub struct BenchTarget<'a> {
    pub proxy: &'a Proxy,
    pub cloud: Option<CloudAccess>,
}

#[derive(Debug, Clone)]
pub struct CloudAccess {
    pub addr: SocketAddr,
    pub project: ProjectConfig,
}

pub fn probe(seq: u64, class: SizeClass) -> Vec<u8> {
    pad_to_size_class(seq.to_string().as_bytes(), class).expect("a decimal u64 fits every size class")
}

pub fn parse_probe(payload: &[u8]) -> Option<u64> {
    std::str::from_utf8(strip_padding(payload)).ok()?.parse().ok()
}

enum Sender {
    Mqtt(MqttClient),
    Coap(CoapClient),
    Http(HttpClient),
}

impl Sender {
    async fn open(cfg: &ScenarioConfig, target: SocketAddr) -> Result<Sender, BenchError> {
        let link = cfg.link();
        Ok(match cfg.protocol {
            Protocol::Mqtt => {
                link.validate_stream()?;
                let opts = ClientOptions::new(client_id("bp")).model(link);
                Sender::Mqtt(MqttClient::connect(target, opts).await.map_err(setup)?.0)
            }
            Protocol::Coap => {
                link.validate()?;
                let timing = Timing { ack_timeout: Duration::from_millis(cfg.coap_ack_timeout_ms), ..Timing::default() };
                Sender::Coap(CoapClient::open(link, timing).await.map_err(setup)?)
            }
            Protocol::Http => {
                link.validate_stream()?;
                let mut c = HttpClient::new(target, link);
                c.connect().await.map_err(setup)?;
                Sender::Http(c)
            }
        })
    }

    async fn send(&mut self, target: SocketAddr, topic: &str, payload: &[u8]) {
        let path = format!("{TELEMETRY_PATH}/{topic}");
        let ok = match self {
            Sender::Mqtt(c) => c.publish(topic, payload).await.is_ok(),
            Sender::Coap(c) => c.post_confirmable(target, &path, payload).await.is_ok(),
            Sender::Http(c) => c.post(&format!("/{path}"), "application/octet-stream", payload).await.is_ok(),
        };
        if !ok {
            log::debug!("probe send to {target} failed");
        }
    }

    fn link_drops(&self) -> Vec<bool> {
        match self {
            Sender::Coap(c) => c.socket().drop_log(),
            _ => Vec::new(),
        }
    }
}

/// Receipt timestamps keyed by probe seq, filled by a background task.
struct Collector {
    rx: mpsc::UnboundedReceiver<(u64, u64)>,
    _task: Option<AbortOnDrop>,
}

impl Collector {
    /// Waits until every seq in `want` arrived or the deadline passes.
    async fn gather(&mut self, want: &BTreeMap<u64, u64>, warmup: u64, deadline: tokio::time::Instant) -> BTreeMap<u64, u64> {
        let mut got = BTreeMap::new();
        let mut missing = want.len();
        while missing > 0 {
            match tokio::time::timeout_at(deadline, self.rx.recv()).await {
                Ok(Some((seq, ts))) => {
                    if seq >= warmup && want.contains_key(&seq) && got.insert(seq, ts).is_none() {
                        missing -= 1;
                    }
                }
                Ok(None) | Err(_) => break,
            }
        }
        got
    }
}

async fn edge_collector(cfg: &ScenarioConfig, target: &BenchTarget<'_>, topic: &str) -> Result<Collector, BenchError> {
    let (tx, rx) = mpsc::unbounded_channel();
    match cfg.protocol {
        Protocol::Mqtt => {
            let id = client_id("bs");
            let (client, mut msgs) = MqttClient::connect(target.proxy.southbound_addr(), ClientOptions::new(id)).await.map_err(setup)?;
            client.subscribe(&[topic]).await.map_err(setup)?;
            let task = tokio::spawn(async move {
                let _client = client;
                while let Some(m) = msgs.recv().await {
                    if let Some(seq) = parse_probe(&m.payload) {
                        let _ = tx.send((seq, m.recv_ts_ns));
                    }
                }
            });
            Ok(Collector { rx, _task: Some(AbortOnDrop(task)) })
        }
        Protocol::Coap | Protocol::Http => {
            let mut tap = target.proxy.tap();
            let topic = topic.to_string();
            let task = tokio::spawn(async move {
                while let Some(TapEvent { topic: t, payload, arrival_ns }) = tap.recv().await {
                    if t == topic {
                        if let Some(seq) = parse_probe(&payload) {
                            let _ = tx.send((seq, arrival_ns));
                        }
                    }
                }
            });
            Ok(Collector { rx, _task: Some(AbortOnDrop(task)) })
        }
    }
}

async fn cloud_collector(cloud: &CloudAccess, topic: &str) -> Result<Collector, BenchError> {
    let auth: String = url::form_urlencoded::byte_serialize(cloud.project.auth_key.as_bytes()).collect();
    let target = format!("{}.json?stream=true&auth={auth}", encode_target_path(&topic_cloud_path(topic)));
    let (head, mut stream) = LineStream::open(cloud.addr, &target, DelayModel::default()).await.map_err(setup)?;
    if head.status != 200 {
        return Err(BenchError::Setup(format!("cloud stream answered {}", head.status)));
    }
    let (tx, rx) = mpsc::unbounded_channel();
    let task = tokio::spawn(async move {
        while let Ok(Some((line, recv_ns))) = stream.next_line().await {
            let Ok(ev) = serde_json::from_slice::<ChangeEvent>(&line) else { continue };
            let text = serde_json::to_string(&ev.value).expect("value serializes");
            if let Some(seq) = parse_probe(&payload_from_cloud_text(&text)) {
                let _ = tx.send((seq, recv_ns));
            }
        }
    });
    Ok(Collector { rx, _task: Some(AbortOnDrop(task)) })
}

/// Short unique MQTT client id; the broker caps ids at 23 bytes.
fn client_id(prefix: &str) -> String {
    static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    format!("{prefix}{}-{}", std::process::id(), NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed))
}

fn run_tag() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Runs the scenario in its configured scope. End-to-end runs also report
/// the edge receipt of the same probes.
pub async fn run_scenario(cfg: &ScenarioConfig, target: &BenchTarget<'_>) -> Result<BenchReport, BenchError> {
    if cfg.scope == Scope::EndToEnd && target.cloud.is_none() {
        return Err(BenchError::NoCloud);
    }
    let tag = run_tag();
    let mut results = Vec::new();
    for &class in &cfg.size_classes {
        let topic = format!("bench/{tag}/{}/{}", cfg.protocol.label(), class.label());
        let mut edge = edge_collector(cfg, target, &topic).await?;
        let mut cloud = match (&cfg.scope, &target.cloud) {
            (Scope::EndToEnd, Some(c)) => Some(cloud_collector(c, &topic).await?),
            _ => None,
        };
        let south = target.proxy.southbound_addr();
        let mut sender = Sender::open(cfg, south).await?;
        let mut sends = BTreeMap::new();
        for seq in 0..cfg.warmup + cfg.n_messages {
            let payload = probe(seq, class);
            let t0 = now_monotonic_ns();
            sender.send(south, &topic, &payload).await;
            if seq >= cfg.warmup {
                sends.insert(seq, t0);
            }
            if cfg.interval_ms > 0 {
                tokio::time::sleep(Duration::from_millis(cfg.interval_ms)).await;
            }
        }
        let deadline = tokio::time::Instant::now() + Duration::from_millis(cfg.timeout_ms);
        let edge_got = edge.gather(&sends, cfg.warmup, deadline).await;
        let expected = sends.len() as u64;
        let needed = (expected as f64 * MIN_DELIVERY_RATIO).ceil() as u64;
        if (edge_got.len() as u64) < needed {
            return Err(BenchError::ScenarioTimeout {
                protocol: cfg.protocol,
                class,
                received: edge_got.len() as u64,
                expected,
            });
        }
        let drops = sender.link_drops();
        results.push(ClassResult::build(cfg.protocol, Scope::Edge, class, &sends, &edge_got, drops.clone()));
        if let Some(c) = cloud.as_mut() {
            let got = c.gather(&sends, cfg.warmup, deadline).await;
            let r = ClassResult::build(cfg.protocol, Scope::EndToEnd, class, &sends, &got, drops);
            if !r.unmatched.is_empty() {
                log::warn!("{class}: {} probes never reached the cloud stream", r.unmatched.len());
            }
            results.push(r);
        }
    }
    let overhead = run_overhead_comparison(&cfg.size_classes.iter().map(|c| c.target_len()).collect::<Vec<_>>()).await?;
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        manifest: Manifest { tool: env!("CARGO_PKG_NAME").into(), version: env!("CARGO_PKG_VERSION").into(), scenario: cfg.clone() },
        results,
        overhead,
    })
}

pub async fn run_edge_scenario(cfg: &ScenarioConfig, target: &BenchTarget<'_>) -> Result<BenchReport, BenchError> {
    run_scenario(&ScenarioConfig { scope: Scope::Edge, ..cfg.clone() }, target).await
}

pub async fn run_end_to_end_scenario(cfg: &ScenarioConfig, target: &BenchTarget<'_>) -> Result<BenchReport, BenchError> {
    run_scenario(&ScenarioConfig { scope: Scope::EndToEnd, ..cfg.clone() }, target).await
}

/// Codec-level size of one overhead-comparison message.
pub fn codec_bytes(protocol: Protocol, payload: &[u8]) -> u64 {
    let n = match protocol {
        Protocol::Mqtt => Packet::Publish { topic: OVERHEAD_MQTT_TOPIC.into(), payload: payload.to_vec() }
            .encode()
            .expect("publish encodes")
            .len(),
        Protocol::Coap => {
            let mut m = notelab_core::coap::Message::new(notelab_core::coap::MessageType::NonConfirmable, Code::POST, 0)
                .with_path(TELEMETRY_PATH);
            m.token = vec![0, 0];
            m.payload = payload.to_vec();
            m.encode().expect("request encodes").len()
        }
        Protocol::Http => Request::new(Method::Post, format!("/{TELEMETRY_PATH}"))
            .header("Content-Type", "application/octet-stream")
            .header("Host", OVERHEAD_HTTP_HOST)
            .body(payload.to_vec())
            .encode()
            .len(),
    };
    n as u64
}

const OVERHEAD_ROUNDS: u64 = 10;

/// Sends identical payloads of each size through each protocol to a
/// counting sink and reports client-to-server bytes per message: MQTT
/// QoS 0 PUBLISH to the classroom topic, CoAP NON POST to `telemetry`,
/// HTTP/1.1 POST to `/telemetry` on a kept-alive connection.
pub async fn run_overhead_comparison(payload_sizes: &[usize]) -> Result<Vec<OverheadRow>, BenchError> {
    let local: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
    let mut broker = Broker::bind(local).await.map_err(setup)?;
    let sink: CoapHandler = Arc::new(|_| Code::CHANGED);
    let mut coap_sink = CoapServer::bind(local, DelayModel::default(), sink).await.map_err(setup)?;
    let mut http_sink = HttpServer::bind(local, handler(|_, _| async { Response::new(200).into() })).await.map_err(setup)?;

    let (mqtt, _rx) = MqttClient::connect(broker.local_addr(), ClientOptions::new("overhead")).await.map_err(setup)?;
    let coap = CoapClient::open(DelayModel::default(), Timing::default()).await.map_err(setup)?;
    let mut http = HttpClient::new(http_sink.local_addr(), DelayModel::default()).with_host(OVERHEAD_HTTP_HOST);
    http.connect().await.map_err(setup)?;

    let mut rows = Vec::new();
    for &len in payload_sizes {
        let payload = vec![b'x'; len];
        for protocol in Protocol::ALL {
            let before = match protocol {
                Protocol::Mqtt => mqtt.counters().sent(),
                Protocol::Coap => coap.counters().sent(),
                Protocol::Http => http.counters().sent(),
            };
            for _ in 0..OVERHEAD_ROUNDS {
                match protocol {
                    Protocol::Mqtt => mqtt.publish(OVERHEAD_MQTT_TOPIC, &payload).await.map_err(setup)?,
                    Protocol::Coap => coap.post_non(coap_sink.local_addr(), TELEMETRY_PATH, &payload).await.map_err(setup)?,
                    Protocol::Http => {
                        http.post(&format!("/{TELEMETRY_PATH}"), "application/octet-stream", &payload).await.map_err(setup)?;
                    }
                }
            }
            let after = match protocol {
                Protocol::Mqtt => mqtt.counters().sent(),
                Protocol::Coap => coap.counters().sent(),
                Protocol::Http => http.counters().sent(),
            };
            let per = (after - before) / OVERHEAD_ROUNDS;
            let target = match protocol {
                Protocol::Mqtt => OVERHEAD_MQTT_TOPIC.to_string(),
                _ => format!("/{TELEMETRY_PATH}"),
            };
            rows.push(OverheadRow {
                protocol,
                target,
                payload_len: len,
                bytes_per_message: per,
                bytes_per_1000: per * 1000,
                codec_bytes: codec_bytes(protocol, &payload),
            });
        }
    }
    broker.shutdown().await;
    coap_sink.shutdown().await;
    http_sink.shutdown().await;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotEntry {
    pub protocol: Protocol,
    pub scope: Scope,
    pub size_class: SizeClass,
    pub n: usize,
    pub summary_s: FiveNumber,
}

pub fn boxplot_data(report: &BenchReport) -> Vec<BoxplotEntry> {
    report
        .results
        .iter()
        .filter_map(|r| {
            let lat: Vec<f64> = r.samples.iter().map(LatencySample::latency_s).collect();
            five_number_summary(&lat).ok().map(|summary_s| BoxplotEntry {
                protocol: r.protocol,
                scope: r.scope,
                size_class: r.size_class,
                n: lat.len(),
                summary_s,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow {
    protocol: Protocol,
    scope: Scope,
    size_class: SizeClass,
    seq: u64,
    send_ts_ns: u64,
    recv_ts_ns: u64,
    latency_s: f64,
}

/// Writes `report.json`, `samples.csv` and `boxplot.json` into `dir`.
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_vec_pretty(report).map_err(|e| BenchError::Encode(e.to_string()))?)?;

    let csv_path = dir.join("samples.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| BenchError::Encode(e.to_string()))?;
    for r in &report.results {
        for s in &r.samples {
            w.serialize(CsvRow {
                protocol: r.protocol,
                scope: r.scope,
                size_class: r.size_class,
                seq: s.seq,
                send_ts_ns: s.send_ts_ns,
                recv_ts_ns: s.recv_ts_ns,
                latency_s: s.latency_s(),
            })
            .map_err(|e| BenchError::Encode(e.to_string()))?;
        }
    }
    if report.results.iter().all(|r| r.samples.is_empty()) {
        w.write_record(["protocol", "scope", "size_class", "seq", "send_ts_ns", "recv_ts_ns", "latency_s"])
            .map_err(|e| BenchError::Encode(e.to_string()))?;
    }
    w.flush()?;

    let boxplot = dir.join("boxplot.json");
    std::fs::write(&boxplot, serde_json::to_vec_pretty(&boxplot_data(report)).map_err(|e| BenchError::Encode(e.to_string()))?)?;
    Ok(vec![json, csv_path, boxplot])
}

pub fn load_report(path: &Path) -> Result<BenchReport, BenchError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| BenchError::Encode(e.to_string()))
}

/// Min/Max/Mean/Std table in seconds, one row per result, followed by the
/// overhead table.
pub fn format_table(report: &BenchReport) -> String {
    let mut out = format!(
        "{:<6} {:<11} {:<5} {:>5} {:>10} {:>10} {:>10} {:>10}\n",
        "proto", "scope", "size", "n", "min_s", "max_s", "mean_s", "std_s"
    );
    for r in &report.results {
        match r.stats {
            Some(s) => out.push_str(&format!(
                "{:<6} {:<11} {:<5} {:>5} {:>10.6} {:>10.6} {:>10.6} {:>10.6}\n",
                r.protocol.label(),
                r.scope.label(),
                r.size_class.label(),
                s.n,
                s.min_s,
                s.max_s,
                s.mean_s,
                s.std_s
            )),
            None => out.push_str(&format!(
                "{:<6} {:<11} {:<5} {:>5} {:>10} {:>10} {:>10} {:>10}\n",
                r.protocol.label(),
                r.scope.label(),
                r.size_class.label(),
                0,
                "-",
                "-",
                "-",
                "-"
            )),
        }
        if !r.unmatched.is_empty() {
            out.push_str(&format!("       unmatched seqs: {:?}\n", r.unmatched));
        }
    }
    for (class, slower) in report.end_to_end_slower() {
        out.push_str(&format!("{class}: end-to-end mean > edge mean: {}\n", if slower { "yes" } else { "NO" }));
    }
    if !report.overhead.is_empty() {
        out.push_str(&format!("\n{:<6} {:>8} {:>10} {:>12}\n", "proto", "payload", "bytes/msg", "bytes/1000"));
        for o in &report.overhead {
            out.push_str(&format!("{:<6} {:>8} {:>10} {:>12}\n", o.protocol.label(), o.payload_len, o.bytes_per_message, o.bytes_per_1000));
        }
    }
    out
}

/// A transient cloud, connector and one proxy per protocol on loopback,
/// for self-contained bench runs.
pub struct Testbed {
    pub cloud: CloudServer,
    pub connector: Connector,
    pub proxies: Vec<Proxy>,
    project: ProjectConfig,
}

impl Testbed {
    pub async fn launch(data_dir: &Path) -> Result<Testbed, BenchError> {
        let local: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
        let project = ProjectConfig::new("notelab-bench", "bench-key");
        let cloud = CloudServer::start(project.clone(), local, None).await.map_err(setup)?;
        let sync = SyncConfig::new(project.clone(), cloud.local_addr());
        let connector = Connector::start(data_dir.join("connector"), LogConfig::default(), local, Some(sync)).await.map_err(setup)?;
        let mut proxies = Vec::new();
        for p in Protocol::ALL {
            let cfg = ProxyConfig::new(format!("bench-{}", p.label()), p.flavor(), local, connector.local_addr());
            proxies.push(Proxy::start(cfg).await.map_err(setup)?);
        }
        Ok(Testbed { cloud, connector, proxies, project })
    }

    pub fn proxy(&self, protocol: Protocol) -> &Proxy {
        self.proxies.iter().find(|p| p.flavor() == protocol.flavor()).expect("one proxy per protocol")
    }

    pub fn cloud_access(&self) -> CloudAccess {
        CloudAccess { addr: self.cloud.local_addr(), project: self.project.clone() }
    }

    pub fn target(&self, protocol: Protocol) -> BenchTarget<'_> {
        BenchTarget { proxy: self.proxy(protocol), cloud: Some(self.cloud_access()) }
    }

    pub async fn shutdown(mut self) {
        for p in &mut self.proxies {
            p.shutdown(Duration::from_millis(500)).await;
        }
        let _ = self.connector.shutdown().await;
        self.cloud.shutdown().await;
    }
}

/// Filter matching every probe topic.
pub fn bench_filter() -> TopicFilter {
    TopicFilter::new("bench/#").expect("valid filter")
}
