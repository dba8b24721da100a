//! Edge proxies: a southbound broker or server terminating device traffic,
//! and a northbound producer forwarding each accepted message to the
//! connector as a [`StreamRecord`].
//!
//! Southbound surfaces per flavor:
//!
//! - `mqtt-proxy`: an embedded broker; every publish is ingested.
//! - `coap-proxy`: `POST coap://host/telemetry` with an envelope payload,
//!   or `POST coap://host/telemetry/<topic levels>` with a raw payload.
//! - `http-proxy`: the same two paths as `POST` requests.
//!
//! The producer is stop-and-wait: one PRODUCE in flight, resent on a fresh
//! connection when its ACK does not arrive within the ack timeout.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use notelab_core::coap::Code;
use notelab_core::frame::{Frame, FrameType};
use notelab_core::http::{Method, Request, Response};
use notelab_core::link::DelayModel;
use notelab_core::record::StreamRecord;
use notelab_core::{Envelope, Topic, TopicFilter};
use percent_encoding::percent_decode_str;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::{mpsc, Notify};

use crate::clock::now_monotonic_ns;
use crate::coap::{CoapError, CoapHandler, CoapRequest, CoapServer};
use crate::connector::{Hello, ProduceAck};
use crate::http::{handler, HttpServer};
use crate::mqtt::{Broker, MqttError};
use crate::service::AbortOnDrop;
use crate::shim::{open_stream, ShimError, ShimStream};

pub const DEFAULT_QUEUE_CAPACITY: usize = 10_000;
pub const DEFAULT_ACK_TIMEOUT_MS: u64 = 3_000;
/// Southbound path prefix on the CoAP and HTTP flavors.
pub const TELEMETRY_PATH: &str = "telemetry";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    MqttProxy,
    CoapProxy,
    HttpProxy,
}

impl Flavor {
    pub fn default_port(self) -> u16 {
        match self {
            Flavor::MqttProxy => crate::mqtt::DEFAULT_PORT,
            Flavor::CoapProxy => crate::coap::DEFAULT_PORT,
            Flavor::HttpProxy => crate::http::DEFAULT_PORT,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Flavor::MqttProxy => "mqtt-proxy",
            Flavor::CoapProxy => "coap-proxy",
            Flavor::HttpProxy => "http-proxy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub id: String,
    pub flavor: Flavor,
    pub listen: SocketAddr,
    pub northbound: SocketAddr,
    /// Topic filters allowed northbound; `None` forwards everything.
    #[serde(default)]
    pub topic_allowlist: Option<Vec<String>>,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_ack_timeout")]
    pub ack_timeout_ms: u64,
    #[serde(default = "default_backoff_initial")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_backoff_cap")]
    pub backoff_cap_ms: u64,
    /// Link model for the proxy's own datagram socket (CoAP replies).
    #[serde(default)]
    pub southbound_link: DelayModel,
    #[serde(default)]
    pub northbound_link: DelayModel,
}

fn default_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}
fn default_ack_timeout() -> u64 {
    DEFAULT_ACK_TIMEOUT_MS
}
fn default_backoff_initial() -> u64 {
    100
}
fn default_backoff_cap() -> u64 {
    2_000
}

impl ProxyConfig {
    pub fn new(id: impl Into<String>, flavor: Flavor, listen: SocketAddr, northbound: SocketAddr) -> Self {
        ProxyConfig {
            id: id.into(),
            flavor,
            listen,
            northbound,
            topic_allowlist: None,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            ack_timeout_ms: DEFAULT_ACK_TIMEOUT_MS,
            backoff_initial_ms: default_backoff_initial(),
            backoff_cap_ms: default_backoff_cap(),
            southbound_link: DelayModel::default(),
            northbound_link: DelayModel::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error("allowlist filter {0:?} is invalid")]
    BadFilter(String),
    #[error("queue capacity must be at least 1")]
    ZeroCapacity,
    #[error(transparent)]
    Mqtt(#[from] MqttError),
    #[error(transparent)]
    Coap(#[from] CoapError),
    #[error(transparent)]
    Bind(#[from] ShimError),
}

/// Counter snapshot. `accepted = forwarded + filtered + dropped + queued +
/// in_flight` holds in every snapshot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyStats {
    pub accepted: u64,
    pub forwarded: u64,
    pub filtered: u64,
    pub dropped: u64,
    pub queued: u64,
    pub in_flight: u64,
    pub rejected: u64,
    pub reconnects: u64,
    pub resends: u64,
    pub connected: bool,
}

impl ProxyStats {
    pub fn conserved(&self) -> bool {
        self.accepted == self.forwarded + self.filtered + self.dropped + self.queued + self.in_flight
    }
}

/// One accepted southbound message as seen at the proxy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapEvent {
    pub topic: String,
    pub payload: Vec<u8>,
    pub arrival_ns: u64,
}

#[derive(Default)]
struct QueueState {
    queue: VecDeque<StreamRecord>,
    in_flight: Option<StreamRecord>,
    next_seq: HashMap<String, u64>,
    stats: ProxyStats,
    taps: Vec<mpsc::UnboundedSender<TapEvent>>,
}

struct Shared {
    id: String,
    /// Distinguishes raw-payload sources across proxy restarts.
    epoch: u128,
    allowlist: Option<Vec<TopicFilter>>,
    capacity: usize,
    state: Mutex<QueueState>,
    ready: Notify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ingest {
    Queued,
    Filtered,
}

impl Shared {
    fn ingest(&self, topic: &str, payload: Vec<u8>, arrival_ns: u64, session: &str) -> Ingest {
        let mut st = self.state.lock().unwrap();
        st.stats.accepted += 1;
        if !st.taps.is_empty() {
            let ev = TapEvent { topic: topic.to_string(), payload: payload.clone(), arrival_ns };
            st.taps.retain(|t| t.send(ev.clone()).is_ok());
        }
        let allowed = match &self.allowlist {
            None => true,
            Some(filters) => Topic::new(topic).is_ok_and(|t| filters.iter().any(|f| f.matches(&t))),
        };
        if !allowed {
            st.stats.filtered += 1;
            return Ingest::Filtered;
        }
        let source = format!("{session}@{}", self.epoch);
        let counter = st.next_seq.entry(source.clone()).or_insert(0);
        let seq = *counter;
        *counter += 1;
        let record = StreamRecord::from_southbound(&self.id, topic, payload, arrival_ns, &source, seq);
        if st.queue.len() >= self.capacity {
            st.queue.pop_front();
            st.stats.dropped += 1;
        }
        st.queue.push_back(record);
        st.stats.queued = st.queue.len() as u64;
        drop(st);
        self.ready.notify_one();
        Ingest::Queued
    }

    fn reject(&self) {
        self.state.lock().unwrap().stats.rejected += 1;
    }

    /// The in-flight record, or the queue head promoted to in-flight.
    fn next_record(&self) -> Option<StreamRecord> {
        let mut st = self.state.lock().unwrap();
        if st.in_flight.is_none() {
            let next = st.queue.pop_front()?;
            st.in_flight = Some(next);
            st.stats.queued = st.queue.len() as u64;
            st.stats.in_flight = 1;
        }
        st.in_flight.clone()
    }

    fn acknowledged(&self) {
        let mut st = self.state.lock().unwrap();
        if st.in_flight.take().is_some() {
            st.stats.in_flight = 0;
            st.stats.forwarded += 1;
        }
    }

    fn stats(&self) -> ProxyStats {
        self.state.lock().unwrap().stats
    }
}

enum Southbound {
    Mqtt { broker: Broker, _pump: AbortOnDrop },
    Coap(CoapServer),
    Http(HttpServer),
}

pub struct Proxy {
    config: ProxyConfig,
    shared: Arc<Shared>,
    south: Southbound,
    producer: Option<AbortOnDrop>,
}

impl Proxy {
    pub async fn start(config: ProxyConfig) -> Result<Proxy, ProxyError> {
        let allowlist = match &config.topic_allowlist {
            None => None,
            Some(fs) => Some(
                fs.iter()
                    .map(|f| TopicFilter::new(f.as_str()).map_err(|_| ProxyError::BadFilter(f.clone())))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        if config.queue_capacity == 0 {
            return Err(ProxyError::ZeroCapacity);
        }
        let epoch = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let shared = Arc::new(Shared {
            id: config.id.clone(),
            epoch,
            allowlist,
            capacity: config.queue_capacity,
            state: Mutex::new(QueueState::default()),
            ready: Notify::new(),
        });
        let south = match config.flavor {
            Flavor::MqttProxy => {
                let broker = Broker::bind(config.listen).await?;
                let mut rx = broker.subscribe_local(TopicFilter::new("#").expect("'#' is a valid filter"));
                let s = shared.clone();
                let pump = tokio::spawn(async move {
                    while let Some(d) = rx.recv().await {
                        s.ingest(&d.topic, d.payload, d.received_ns, &d.client_id);
                    }
                });
                Southbound::Mqtt { broker, _pump: AbortOnDrop(pump) }
            }
            Flavor::CoapProxy => {
                let s = shared.clone();
                let h: CoapHandler = Arc::new(move |req: CoapRequest| coap_ingest(&s, req));
                Southbound::Coap(CoapServer::bind(config.listen, config.southbound_link, h).await?)
            }
            Flavor::HttpProxy => {
                let s = shared.clone();
                let h = handler(move |req: Request, peer: SocketAddr| {
                    let resp = http_ingest(&s, req, peer);
                    async move { resp.into() }
                });
                Southbound::Http(HttpServer::bind(config.listen, h).await?)
            }
        };
        let producer = tokio::spawn(produce_loop(shared.clone(), config.clone()));
        Ok(Proxy { config, shared, south, producer: Some(AbortOnDrop(producer)) })
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn flavor(&self) -> Flavor {
        self.config.flavor
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn southbound_addr(&self) -> SocketAddr {
        match &self.south {
            Southbound::Mqtt { broker, .. } => broker.local_addr(),
            Southbound::Coap(s) => s.local_addr(),
            Southbound::Http(s) => s.local_addr(),
        }
    }

    pub fn broker(&self) -> Option<&Broker> {
        match &self.south {
            Southbound::Mqtt { broker, .. } => Some(broker),
            _ => None,
        }
    }

    pub fn stats(&self) -> ProxyStats {
        self.shared.stats()
    }

    /// Every message accepted from now on, before allowlist filtering.
    pub fn tap(&self) -> mpsc::UnboundedReceiver<TapEvent> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.shared.state.lock().unwrap().taps.push(tx);
        rx
    }

    pub fn is_running(&self) -> bool {
        let south = match &self.south {
            Southbound::Mqtt { broker, .. } => broker.is_running(),
            Southbound::Coap(s) => s.is_running(),
            Southbound::Http(s) => s.is_running(),
        };
        south && self.producer.as_ref().is_some_and(|p| !p.0.is_finished())
    }

    /// Waits until nothing is queued or in flight.
    pub async fn drained(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let s = self.stats();
            if s.queued == 0 && s.in_flight == 0 {
                return true;
            }
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    /// Stops the southbound side, gives the queue `grace` to drain, then
    /// stops the producer.
    pub async fn shutdown(&mut self, grace: Duration) {
        match &mut self.south {
            Southbound::Mqtt { broker, .. } => broker.shutdown().await,
            Southbound::Coap(s) => s.shutdown().await,
            Southbound::Http(s) => s.shutdown().await,
        }
        self.drained(grace).await;
        if let Some(mut p) = self.producer.take() {
            p.0.abort();
            let _ = (&mut p.0).await;
        }
    }
}

/// `telemetry` takes an envelope; `telemetry/<levels>` takes a raw payload
/// for that topic.
fn telemetry_topic(path: &str, payload: &[u8]) -> Result<String, &'static str> {
    let path = path.trim_start_matches('/');
    let rest = path.strip_prefix(TELEMETRY_PATH).ok_or("unknown path")?;
    if rest.is_empty() {
        return Envelope::decode(payload).map(|e| e.topic.as_str().to_string()).map_err(|_| "expected an envelope");
    }
    let levels = rest.strip_prefix('/').ok_or("unknown path")?;
    Topic::new(levels).map(|t| t.as_str().to_string()).map_err(|_| "invalid topic")
}

fn coap_ingest(shared: &Shared, req: CoapRequest) -> Code {
    if req.code != Code::POST {
        shared.reject();
        return Code::METHOD_NOT_ALLOWED;
    }
    match telemetry_topic(&req.path, &req.payload) {
        Ok(topic) => {
            shared.ingest(&topic, req.payload, now_monotonic_ns(), &req.peer.to_string());
            Code::CHANGED
        }
        Err("unknown path") => {
            shared.reject();
            Code::NOT_FOUND
        }
        Err(_) => {
            shared.reject();
            Code::BAD_REQUEST
        }
    }
}

fn http_ingest(shared: &Shared, req: Request, peer: SocketAddr) -> Response {
    let arrival = now_monotonic_ns();
    if req.method != Method::Post {
        shared.reject();
        return Response::new(405);
    }
    let path = percent_decode_str(req.path()).decode_utf8_lossy().into_owned();
    match telemetry_topic(&path, &req.body) {
        Ok(topic) => {
            shared.ingest(&topic, req.body, arrival, &peer.to_string());
            Response::new(200)
        }
        Err(reason) => {
            shared.reject();
            let status = if reason == "unknown path" { 404 } else { 400 };
            Response::with_body(status, "text/plain", reason.as_bytes().to_vec())
        }
    }
}

struct Northbound {
    stream: ShimStream,
    buf: Vec<u8>,
}

impl Northbound {
    async fn exchange(&mut self, frame: &Frame) -> std::io::Result<Frame> {
        self.stream.write_all(&frame.encode()).await?;
        loop {
            match Frame::decode(&self.buf) {
                Ok(Some((f, used))) => {
                    self.buf.drain(..used);
                    return Ok(f);
                }
                Ok(None) => {}
                Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            }
            if self.stream.read_buf(&mut self.buf).await? == 0 {
                return Err(std::io::ErrorKind::UnexpectedEof.into());
            }
        }
    }
}

async fn connect_northbound(cfg: &ProxyConfig, timeout: Duration) -> Result<Northbound, String> {
    let stream = open_stream(cfg.northbound, cfg.northbound_link).await.map_err(|e| e.to_string())?;
    let mut nb = Northbound { stream, buf: Vec::new() };
    let hello = serde_json::to_vec(&Hello { proxy_id: cfg.id.clone() }).expect("hello serializes");
    match tokio::time::timeout(timeout, nb.exchange(&Frame::new(FrameType::Hello, hello))).await {
        Ok(Ok(f)) if f.kind == FrameType::Hello => Ok(nb),
        Ok(Ok(f)) => Err(format!("expected HELLO, got {:?}", f.kind)),
        Ok(Err(e)) => Err(e.to_string()),
        Err(_) => Err("HELLO timed out".into()),
    }
}

async fn produce_loop(shared: Arc<Shared>, cfg: ProxyConfig) {
    let ack_timeout = Duration::from_millis(cfg.ack_timeout_ms);
    let initial = Duration::from_millis(cfg.backoff_initial_ms);
    let cap = Duration::from_millis(cfg.backoff_cap_ms);
    let mut backoff = initial;
    let mut first = true;
    loop {
        if !first {
            tokio::time::sleep(backoff).await;
            backoff = (backoff * 2).min(cap);
            shared.state.lock().unwrap().stats.reconnects += 1;
        }
        first = false;
        let mut nb = match connect_northbound(&cfg, ack_timeout).await {
            Ok(nb) => nb,
            Err(e) => {
                log::debug!("{}: northbound connect failed: {e}", cfg.id);
                continue;
            }
        };
        shared.state.lock().unwrap().stats.connected = true;
        loop {
            let record = loop {
                if let Some(r) = shared.next_record() {
                    break r;
                }
                shared.ready.notified().await;
            };
            let body = serde_json::to_vec(&record).expect("record serializes");
            let outcome = tokio::time::timeout(ack_timeout, nb.exchange(&Frame::new(FrameType::Produce, body))).await;
            let ack = match outcome {
                Ok(Ok(f)) if f.kind == FrameType::Ack => serde_json::from_slice::<ProduceAck>(&f.body).ok(),
                _ => None,
            };
            match ack {
                Some(ProduceAck { error: None, .. }) => {
                    shared.acknowledged();
                    backoff = initial;
                }
                Some(ProduceAck { error: Some(e), .. }) => {
                    log::warn!("{}: connector refused record: {e}", cfg.id);
                    shared.state.lock().unwrap().stats.resends += 1;
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(cap);
                }
                None => {
                    shared.state.lock().unwrap().stats.resends += 1;
                    break;
                }
            }
        }
        shared.state.lock().unwrap().stats.connected = false;
    }
}
