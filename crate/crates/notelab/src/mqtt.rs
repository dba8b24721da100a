//! Embedded MQTT 3.1.1 broker and client, QoS 0 and clean sessions only.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use notelab_core::link::DelayModel;
use notelab_core::mqtt::{self, Packet, CONNACK_ACCEPTED};
use notelab_core::topic::{Topic, TopicFilter};
use serde::Serialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt, ReadHalf, WriteHalf};
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;

use crate::clock::now_monotonic_ns;
use crate::service::{reap, AbortOnDrop, Connections, Service};
use crate::shim::{open_stream, ByteCounters, ShimError, ShimListener, ShimStream};

pub const DEFAULT_PORT: u16 = 1883;
pub const SUBACK_TIMEOUT: Duration = Duration::from_secs(5);
const CONNECT_WAIT: Duration = Duration::from_secs(10);
const READ_CHUNK: usize = 16 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum MqttError {
    #[error("not connected")]
    NotConnected,
    #[error("no SUBACK within the timeout")]
    SubackTimeout,
    #[error("broker refused the connection with code {0}")]
    Refused(u8),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Encode(#[from] mqtt::EncodeError),
    #[error(transparent)]
    Shim(#[from] ShimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A publish as seen by an in-process subscriber of the broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub client_id: String,
    pub topic: String,
    pub payload: Vec<u8>,
    pub received_ns: u64,
}

#[derive(Debug, Default, Serialize)]
pub struct BrokerStats {
    pub connections: u64,
    pub publishes: u64,
    pub deliveries: u64,
    pub violations: u64,
}

#[derive(Default)]
struct Counters {
    connections: AtomicU64,
    publishes: AtomicU64,
    deliveries: AtomicU64,
    violations: AtomicU64,
}

enum Outbound {
    Bytes(Arc<[u8]>),
    Close,
}

struct Session {
    conn_id: u64,
    tx: mpsc::UnboundedSender<Outbound>,
    filters: Vec<TopicFilter>,
}

#[derive(Default)]
struct BrokerState {
    sessions: HashMap<String, Session>,
    local: Vec<(TopicFilter, mpsc::UnboundedSender<Delivery>)>,
    next_conn: u64,
    next_auto_id: u64,
}

/// Fans one publish out to every matching session and local subscriber.
/// Runs under the state lock, which fixes a single delivery order.
fn route(state: &mut BrokerState, counters: &Counters, from: &str, topic: &str, payload: &[u8]) {
    counters.publishes.fetch_add(1, Ordering::Relaxed);
    let Ok(t) = Topic::new(topic) else { return };
    let mut encoded: Option<Arc<[u8]>> = None;
    for s in state.sessions.values() {
        if s.filters.iter().any(|f| f.matches(&t)) {
            let bytes = encoded.get_or_insert_with(|| {
                Packet::Publish { topic: topic.to_string(), payload: payload.to_vec() }
                    .encode()
                    .expect("validated publish re-encodes")
                    .into()
            });
            if s.tx.send(Outbound::Bytes(bytes.clone())).is_ok() {
                counters.deliveries.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
    let received_ns = now_monotonic_ns();
    state.local.retain(|(filter, tx)| {
        if !filter.matches(&t) {
            return !tx.is_closed();
        }
        let d = Delivery { client_id: from.to_string(), topic: topic.to_string(), payload: payload.to_vec(), received_ns };
        tx.send(d).is_ok()
    });
}

/// Handle to a running broker.
pub struct Broker {
    state: Arc<Mutex<BrokerState>>,
    counters: Arc<Counters>,
    bytes: Arc<ByteCounters>,
    service: Service,
}

impl Broker {
    pub async fn bind(addr: SocketAddr) -> Result<Broker, MqttError> {
        let listener = ShimListener::bind(addr, DelayModel::default()).await?;
        let local_addr = listener.local_addr();
        let bytes = listener.counters();
        let state = Arc::new(Mutex::new(BrokerState::default()));
        let counters = Arc::new(Counters::default());
        let task = tokio::spawn(accept_loop(listener, state.clone(), counters.clone()));
        Ok(Broker { state, counters, bytes, service: Service::new(local_addr, task) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.service.local_addr()
    }

    /// In-process subscription that sees every matching publish together
    /// with the publishing client id.
    pub fn subscribe_local(&self, filter: TopicFilter) -> mpsc::UnboundedReceiver<Delivery> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.state.lock().unwrap().local.push((filter, tx));
        rx
    }

    /// Publishes as if from an in-process client.
    pub fn publish_local(&self, topic: &Topic, payload: &[u8]) {
        let mut state = self.state.lock().unwrap();
        route(&mut state, &self.counters, "$local", topic.as_str(), payload);
    }

    pub fn session_count(&self) -> usize {
        self.state.lock().unwrap().sessions.len()
    }

    pub fn stats(&self) -> BrokerStats {
        BrokerStats {
            connections: self.counters.connections.load(Ordering::Relaxed),
            publishes: self.counters.publishes.load(Ordering::Relaxed),
            deliveries: self.counters.deliveries.load(Ordering::Relaxed),
            violations: self.counters.violations.load(Ordering::Relaxed),
        }
    }

    pub fn byte_counters(&self) -> Arc<ByteCounters> {
        self.bytes.clone()
    }

    pub fn is_running(&self) -> bool {
        self.service.is_running()
    }

    pub async fn shutdown(&mut self) {
        self.service.shutdown().await;
        self.state.lock().unwrap().sessions.clear();
    }
}

async fn accept_loop(listener: ShimListener, state: Arc<Mutex<BrokerState>>, counters: Arc<Counters>) {
    let mut conns = Connections::new();
    loop {
        let Ok(stream) = listener.accept().await else { continue };
        reap(&mut conns);
        counters.connections.fetch_add(1, Ordering::Relaxed);
        let (state, counters) = (state.clone(), counters.clone());
        conns.spawn(async move {
            if let Err(reason) = serve_connection(stream, &state, &counters).await {
                counters.violations.fetch_add(1, Ordering::Relaxed);
                log::debug!("mqtt connection closed: {reason}");
            }
        });
    }
}

/// Reads from `rd` until one whole packet is buffered.
async fn next_packet(rd: &mut ReadHalf<ShimStream>, buf: &mut Vec<u8>) -> Result<Option<Packet>, String> {
    loop {
        match mqtt::decode(buf) {
            Ok(Some((p, used))) => {
                buf.drain(..used);
                return Ok(Some(p));
            }
            Ok(None) => {}
            Err(e) => return Err(e.to_string()),
        }
        let n = rd.read_buf(buf).await.map_err(|e| e.to_string())?;
        if n == 0 {
            return if buf.is_empty() { Ok(None) } else { Err("connection closed mid-packet".into()) };
        }
    }
}

async fn serve_connection(stream: ShimStream, state: &Mutex<BrokerState>, counters: &Counters) -> Result<(), String> {
    let (mut rd, mut wr) = tokio::io::split(stream);
    let mut buf = Vec::with_capacity(READ_CHUNK);
    let first = tokio::time::timeout(CONNECT_WAIT, next_packet(&mut rd, &mut buf))
        .await
        .map_err(|_| "no CONNECT".to_string())??;
    let Some(Packet::Connect { client_id, keepalive_s }) = first else {
        return match first {
            None => Ok(()),
            Some(p) => Err(format!("expected CONNECT, got {}", p.kind())),
        };
    };
    let (tx, mut rx) = mpsc::unbounded_channel();
    let (client_id, conn_id) = {
        let mut st = state.lock().unwrap();
        let client_id = if client_id.is_empty() {
            st.next_auto_id += 1;
            format!("auto-{}", st.next_auto_id)
        } else {
            client_id
        };
        st.next_conn += 1;
        let conn_id = st.next_conn;
        // A new connection with the same id takes over the session.
        if let Some(old) = st.sessions.insert(client_id.clone(), Session { conn_id, tx, filters: Vec::new() }) {
            let _ = old.tx.send(Outbound::Close);
        }
        (client_id, conn_id)
    };
    let result = session_loop(&mut rd, &mut wr, &mut buf, &mut rx, &client_id, keepalive_s, state, counters).await;
    let mut st = state.lock().unwrap();
    if st.sessions.get(&client_id).is_some_and(|s| s.conn_id == conn_id) {
        st.sessions.remove(&client_id);
    }
    result
}

#[allow(clippy::too_many_arguments)]
async fn session_loop(
    rd: &mut ReadHalf<ShimStream>,
    wr: &mut WriteHalf<ShimStream>,
    buf: &mut Vec<u8>,
    rx: &mut mpsc::UnboundedReceiver<Outbound>,
    client_id: &str,
    keepalive_s: u16,
    state: &Mutex<BrokerState>,
    counters: &Counters,
) -> Result<(), String> {
    let send = |p: Packet| p.encode().map_err(|e| e.to_string());
    wr.write_all(&send(Packet::Connack { return_code: CONNACK_ACCEPTED })?).await.map_err(|e| e.to_string())?;
    let grace = Duration::from_millis(u64::from(keepalive_s) * 1500);
    let mut deadline = Instant::now() + grace;
    loop {
        // Drain every complete packet already buffered.
        loop {
            let packet = match mqtt::decode(buf) {
                Ok(Some((p, used))) => {
                    buf.drain(..used);
                    p
                }
                Ok(None) => break,
                Err(e) => return Err(e.to_string()),
            };
            deadline = Instant::now() + grace;
            let reply = match packet {
                Packet::Publish { topic, payload } => {
                    route(&mut state.lock().unwrap(), counters, client_id, &topic, &payload);
                    None
                }
                Packet::Subscribe { packet_id, filters } => {
                    let mut granted = Vec::with_capacity(filters.len());
                    let mut st = state.lock().unwrap();
                    let session = st.sessions.get_mut(client_id).ok_or("session taken over")?;
                    for f in filters {
                        match TopicFilter::new(f) {
                            Ok(f) => {
                                if !session.filters.iter().any(|g| g.as_str() == f.as_str()) {
                                    session.filters.push(f);
                                }
                                granted.push(0x00);
                            }
                            Err(_) => granted.push(0x80),
                        }
                    }
                    Some(Packet::Suback { packet_id, granted })
                }
                Packet::Pingreq => Some(Packet::Pingresp),
                Packet::Disconnect => return Ok(()),
                other => return Err(format!("unexpected {} from client", other.kind())),
            };
            if let Some(p) = reply {
                wr.write_all(&send(p)?).await.map_err(|e| e.to_string())?;
            }
        }
        tokio::select! {
            n = rd.read_buf(buf) => match n {
                Ok(0) if buf.is_empty() => return Ok(()),
                Ok(0) => return Err("connection closed mid-packet".into()),
                Ok(_) => {}
                Err(e) => return Err(e.to_string()),
            },
            out = rx.recv() => match out {
                Some(Outbound::Bytes(b)) => wr.write_all(&b).await.map_err(|e| e.to_string())?,
                Some(Outbound::Close) | None => return Ok(()),
            },
            _ = tokio::time::sleep_until(deadline), if keepalive_s > 0 => {
                return Err("keepalive expired".into());
            }
        }
    }
}

/// A message received by a client subscription.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub payload: Vec<u8>,
    pub recv_ts_ns: u64,
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub client_id: String,
    pub keepalive_s: u16,
    pub model: DelayModel,
    pub suback_timeout: Duration,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        ClientOptions {
            client_id: client_id.into(),
            keepalive_s: 60,
            model: DelayModel::default(),
            suback_timeout: SUBACK_TIMEOUT,
        }
    }

    pub fn model(mut self, model: DelayModel) -> Self {
        self.model = model;
        self
    }

    pub fn keepalive(mut self, secs: u16) -> Self {
        self.keepalive_s = secs;
        self
    }
}

type Pending = Arc<Mutex<HashMap<u16, oneshot::Sender<Vec<u8>>>>>;

/// Connected MQTT client. Received publishes arrive on the receiver
/// returned by [`MqttClient::connect`], in broker send order.
pub struct MqttClient {
    writer: tokio::sync::Mutex<WriteHalf<ShimStream>>,
    pending: Pending,
    next_pid: AtomicU16,
    alive: Arc<AtomicBool>,
    counters: Arc<ByteCounters>,
    suback_timeout: Duration,
    _reader: AbortOnDrop,
}

impl MqttClient {
    pub async fn connect(
        addr: SocketAddr,
        opts: ClientOptions,
    ) -> Result<(MqttClient, mpsc::UnboundedReceiver<Message>), MqttError> {
        let stream = open_stream(addr, opts.model).await?;
        let counters = stream.counters().clone();
        let (mut rd, mut wr) = tokio::io::split(stream);
        let connect = Packet::Connect { client_id: opts.client_id.clone(), keepalive_s: opts.keepalive_s };
        wr.write_all(&connect.encode()?).await?;
        let mut buf = Vec::new();
        match tokio::time::timeout(CONNECT_WAIT, next_packet(&mut rd, &mut buf)).await {
            Err(_) => return Err(MqttError::Protocol("no CONNACK".into())),
            Ok(Err(e)) => return Err(MqttError::Protocol(e)),
            Ok(Ok(Some(Packet::Connack { return_code: CONNACK_ACCEPTED }))) => {}
            Ok(Ok(Some(Packet::Connack { return_code }))) => return Err(MqttError::Refused(return_code)),
            Ok(Ok(_)) => return Err(MqttError::Protocol("expected CONNACK".into())),
        }
        let (msg_tx, msg_rx) = mpsc::unbounded_channel();
        let pending: Pending = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        let reader = tokio::spawn(read_loop(rd, buf, msg_tx, pending.clone(), alive.clone()));
        let writer = tokio::sync::Mutex::new(wr);
        let client = MqttClient {
            writer,
            pending,
            next_pid: AtomicU16::new(1),
            alive,
            counters,
            suback_timeout: opts.suback_timeout,
            _reader: AbortOnDrop(reader),
        };
        Ok((client, msg_rx))
    }

    pub fn is_connected(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    pub fn counters(&self) -> &Arc<ByteCounters> {
        &self.counters
    }

    async fn send(&self, p: &Packet) -> Result<(), MqttError> {
        if !self.is_connected() {
            return Err(MqttError::NotConnected);
        }
        let bytes = p.encode()?;
        let mut w = self.writer.lock().await;
        if let Err(e) = w.write_all(&bytes).await {
            self.alive.store(false, Ordering::SeqCst);
            log::debug!("mqtt write failed: {e}");
            return Err(MqttError::NotConnected);
        }
        Ok(())
    }

    /// Fire-and-forget QoS 0 publish.
    pub async fn publish(&self, topic: &str, payload: &[u8]) -> Result<(), MqttError> {
        self.send(&Packet::Publish { topic: topic.to_string(), payload: payload.to_vec() }).await
    }

    /// Subscribes and waits for the SUBACK; returns the granted codes.
    pub async fn subscribe(&self, filters: &[&str]) -> Result<Vec<u8>, MqttError> {
        let mut packet_id = self.next_pid.fetch_add(1, Ordering::Relaxed);
        if packet_id == 0 {
            packet_id = self.next_pid.fetch_add(1, Ordering::Relaxed);
        }
        let (tx, rx) = oneshot::channel();
        self.pending.lock().unwrap().insert(packet_id, tx);
        let sub = Packet::Subscribe { packet_id, filters: filters.iter().map(|f| f.to_string()).collect() };
        if let Err(e) = self.send(&sub).await {
            self.pending.lock().unwrap().remove(&packet_id);
            return Err(e);
        }
        match tokio::time::timeout(self.suback_timeout, rx).await {
            Ok(Ok(granted)) => Ok(granted),
            Ok(Err(_)) => Err(MqttError::NotConnected),
            Err(_) => {
                self.pending.lock().unwrap().remove(&packet_id);
                Err(MqttError::SubackTimeout)
            }
        }
    }

    pub async fn ping(&self) -> Result<(), MqttError> {
        self.send(&Packet::Pingreq).await
    }

    /// Sends PINGREQ every `every` until the client is dropped.
    pub fn spawn_keepalive(self: &Arc<Self>, every: Duration) {
        let weak = Arc::downgrade(self);
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(every).await;
                let Some(c) = weak.upgrade() else { return };
                if c.ping().await.is_err() {
                    return;
                }
            }
        });
    }

    pub async fn disconnect(&self) -> Result<(), MqttError> {
        self.send(&Packet::Disconnect).await?;
        let mut w = self.writer.lock().await;
        let _ = w.shutdown().await;
        self.alive.store(false, Ordering::SeqCst);
        Ok(())
    }
}

async fn read_loop(
    mut rd: ReadHalf<ShimStream>,
    mut buf: Vec<u8>,
    msg_tx: mpsc::UnboundedSender<Message>,
    pending: Pending,
    alive: Arc<AtomicBool>,
) {
    loop {
        match next_packet(&mut rd, &mut buf).await {
            Ok(Some(Packet::Publish { topic, payload })) => {
                let recv_ts_ns = now_monotonic_ns();
                let _ = msg_tx.send(Message { topic, payload, recv_ts_ns });
            }
            Ok(Some(Packet::Suback { packet_id, granted })) => {
                if let Some(tx) = pending.lock().unwrap().remove(&packet_id) {
                    let _ = tx.send(granted);
                }
            }
            Ok(Some(_)) => {}
            Ok(None) | Err(_) => break,
        }
    }
    alive.store(false, Ordering::SeqCst);
    pending.lock().unwrap().clear();
}
